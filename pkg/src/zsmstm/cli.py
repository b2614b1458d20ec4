"""Command-line entry point: ``zsmstm <subcommand> [--config FILE] [flags]``.

Settings resolve as defaults <- config file <- flags <- environment, where
the environment may only override paths (``ZSMSTM_DATA_ROOT``). Every
subcommand writes a ``run.json`` provenance record next to its outputs, also
when it fails after the configuration has been resolved.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import __version__
from .data import (DATA_ROOT_ENV, PATS_SEEN_SPEAKERS, PATS_UNSEEN_SPEAKERS, Sample, fit_normalization,
                   load_manifest, normalize, read_interval, split_speakers)
from .errors import ConfigError, DimensionMismatch, EmptyInput, MissingFile, UnknownSpeaker, ZSMSTMError
from .export import DEFAULT_JOINT_MAP, check_joint_map, export_pose
from .metrics import DEFAULT_WRISTS, METRIC_NAMES, distance_report, metrics_report
from .model import ModelConfig, ZSMSTM
from .synthetic import SynthConfig, gen_dataset
from .training import TrainConfig, Trainer, fit

log = logging.getLogger("zsmstm")

RUN_RECORD = "run.json"
POSE_SUFFIX = ".npy"
INTERVAL_SUFFIXES = (".zsi", ".csv")


@dataclass(frozen=True)
class Option:
    key: str
    type: Callable[[str], Any]
    default: Any
    help: str = ""
    path: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def parse_bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def parse_ints(text: str) -> list[int]:
    return [int(t) for t in parse_list(text)]


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = str(text).lower().split("x")
        res = int(w), int(h)
    except ValueError:
        raise ValueError(f"resolution must look like 1920x1080, got {text!r}") from None
    if min(res) <= 0:
        raise ValueError("resolution must be positive")
    return res


COMMON = [
    Option("seed", int, 0, "global random seed"),
    Option("log_level", str, "INFO", "logging level"),
]

_HELP = {
    "d_model": "speech/pose width (full scale: 768)",
    "d_text": "text embedding width (full scale: 768, from manifest when unset)",
    "n_mels": "mel bins (full scale: 128, from manifest when unset)",
    "patch_size": "square speech patch side (full scale: 16)",
    "patch_stride": "patch stride on both axes (full scale: 10)",
    "speech_layers": "speech encoder layers (full scale: 12)",
    "speech_heads": "speech encoder heads (full scale: 12)",
    "content_att_heads": "content attention heads (full scale: 4)",
    "style_att_heads": "style attention heads (full scale: 4)",
    "pose_lstm_layers": "pose LSTM layers (full scale: 3)",
    "decoder_layers": "decoder layers (full scale: 1)",
    "decoder_heads": "decoder heads (full scale: 2)",
    "J": "joints (full scale: 10, from manifest when unset)",
    "T": "frames per interval (full scale: 64, from manifest when unset)",
    "beta1": "Adam beta1 (full scale: 0.95)",
    "beta2": "Adam beta2 (full scale: 0.999)",
    "initial_lr": "peak learning rate (full scale: 1e-5)",
    "warmup_steps": "warmup steps (full scale: 20000)",
    "epochs": "training epochs (full scale: 200)",
    "batch_size": "batch size (full scale: 24)",
    "lambda_step": "lambda increment per step (full scale: 0.01)",
    "lambda_max": "lambda ceiling (full scale: 1.0)",
}

_MANIFEST_DIMS = ("d_text", "n_mels", "J", "T")


def _dataclass_options(cls, skip=()) -> list[Option]:
    out = []
    for f in fields(cls):
        if f.name in skip or f.name == "seed":
            continue
        default = f.default
        kind = {bool: parse_bool, int: int, float: float}.get(type(default), str)
        if f.name in _MANIFEST_DIMS and cls is ModelConfig:
            default, kind = None, int
        out.append(Option(f.name, kind, default, _HELP.get(f.name, "")))
    return out


SYNTH_OPTIONS = [
    Option("out", str, None, "output dataset directory", path=True),
    Option("n_seen", int, 4, "seen synthetic speakers"),
    Option("n_unseen", int, 2, "held-out synthetic speakers"),
    Option("samples_per_speaker", int, 50, "intervals per speaker"),
    Option("valid_fraction", float, 0.1, "fraction of each speaker's intervals in valid"),
    Option("test_fraction", float, 0.2, "fraction of each speaker's intervals in test"),
    Option("format", str, "zsi", "interval file format: zsi (binary) or csv"),
    Option("J", int, 10, "joints"),
    Option("T", int, 64, "frames per interval"),
    Option("n_mels", int, 128, "mel bins"),
    Option("d_text", int, 768, "text embedding width"),
    Option("n_classes", int, 8, "content classes"),
    Option("fps", float, 15.0, "pose frame rate (full scale: 15)"),
    Option("text_noise", float, 0.05, "text feature noise"),
    Option("mel_noise", float, 0.02, "mel feature noise"),
    Option("style_leak", parse_bool, False, "leak speaker identity into text features"),
]

TRAIN_OPTIONS = [
    Option("data", str, None, "manifest file or dataset directory", path=True),
    Option("out", str, None, "run directory for checkpoints and logs", path=True),
    Option("seen", parse_list, None, "comma list of training speakers (default: speakers.json, else PATS list)"),
    Option("resume", parse_bool, False, "continue from <out>/last.ckpt"),
    Option("threads", int, 1, "torch CPU threads"),
    *_dataclass_options(ModelConfig),
    *_dataclass_options(TrainConfig),
]

EXTRACT_OPTIONS = [
    Option("checkpoint", str, None, "trained checkpoint", path=True),
    Option("data", str, None, "manifest file or dataset directory", path=True),
    Option("speakers", parse_list, None, "comma list of speakers (default: all in manifest)"),
    Option("split", str, "test", "manifest split to average over, or 'all'"),
    Option("out", str, None, "style bank file (.csv for text, otherwise binary)", path=True),
]

TRANSFER_OPTIONS = [
    Option("checkpoint", str, None, "trained checkpoint", path=True),
    Option("source", str, None, "interval file or directory of interval files", path=True),
    Option("source_speaker", str, None, "take sources from this manifest speaker instead of --source"),
    Option("source_split", str, "test", "split used with --source-speaker"),
    Option("target_speaker", str, None, "target speaker id (bank entry or manifest speaker)"),
    Option("style_file", str, None, "style bank file", path=True),
    Option("data", str, None, "manifest used to look up speakers", path=True),
    Option("style_split", str, "test", "split averaged for --target-speaker without --style-file"),
    Option("out", str, None, "output directory for predicted poses (.npy, data units)", path=True),
]

METRICS_OPTIONS = [
    Option("pred", str, None, "directory of predicted poses", path=True),
    Option("source", str, None, "directory of source-speaker poses or intervals", path=True),
    Option("target", str, None, "directory of target-speaker poses or intervals", path=True),
    Option("fps", float, 15.0, "frame rate (full scale: 15)"),
    Option("wrists", parse_ints, list(DEFAULT_WRISTS), "wrist joint indices"),
    Option("out", str, "report.csv", "distance report CSV", path=True),
    Option("plot", str, None, "optional bar-chart image of distance shares", path=True),
]

EXPORT_OPTIONS = [
    Option("pred", str, None, "pose file (.npy or interval)", path=True),
    Option("out", str, None, "output directory", path=True),
    Option("resolution", parse_resolution, (1920, 1080), "frame size WxH used to scale to pixels"),
    Option("joint_map", parse_ints, list(DEFAULT_JOINT_MAP), "BODY25 index for each model joint"),
]

REQUIRED = {
    "synth-data": ("out",),
    "train": ("data", "out"),
    "extract-style": ("checkpoint", "data", "out"),
    "transfer": ("checkpoint", "out"),
    "metrics": ("pred", "source", "target"),
    "export-body25": ("pred", "out"),
}


# ---------------------------------------------------------------- config resolution

def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(options: list[Option], file_values: dict[str, str], flag_values: dict[str, Any],
            env: dict[str, str] | None = None) -> dict[str, Any]:
    by_key = {o.key: o for o in options}
    unknown = sorted(set(file_values) - set(by_key))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = {o.key: o.default for o in options}
    for key, text in file_values.items():
        try:
            cfg[key] = by_key[key].type(text)
        except ValueError as e:
            raise ConfigError(f"config key {key}: {e}") from None
    cfg.update({k: v for k, v in flag_values.items() if v is not None and k in by_key})
    env = os.environ if env is None else env
    if env.get(DATA_ROOT_ENV) and "data" in by_key and cfg.get("data") is None:
        cfg["data"] = env[DATA_ROOT_ENV]
    return cfg


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    return v


def input_hash(path: str | Path) -> str | None:
    """sha256 of a file, or of the sorted (name, hash) listing of a directory."""
    path = Path(path)
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name != RUN_RECORD):
            h.update(str(p.relative_to(path)).encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
        return h.hexdigest()
    return None


def versions() -> dict[str, str]:
    return {"zsmstm": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def record_path(cmd: str, cfg: dict) -> Path:
    """run.json lives in the output directory; file outputs get ``<name>.run.json`` beside them."""
    out = Path(cfg.get("out") or ".")
    if cmd in ("extract-style", "metrics"):
        return out.with_name(out.name + ".run.json")
    return out / RUN_RECORD


def write_run_record(cmd: str, cfg: dict, status: str, error: str | None = None, exit_code: int = 0,
                     extra: dict | None = None) -> Path:
    path = record_path(cmd, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    inputs = {}
    for key in ("data", "checkpoint", "source", "style_file", "pred", "target", "config"):
        if cfg.get(key):
            inputs[key] = {"path": str(cfg[key]), "sha256": input_hash(cfg[key])}
    record = {
        "command": cmd,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "seed": cfg.get("seed"),
        "inputs": inputs,
        "versions": versions(),
        "status": status,
        "exit_code": exit_code,
        "error": error,
        **(extra or {}),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- helpers

def _manifest_path(data: str | Path) -> Path:
    p = Path(data)
    return p / "manifest.tsv" if p.is_dir() else p


def _speaker_lists(data: str | Path, seen: list[str] | None) -> tuple[list[str], list[str]]:
    info_path = _manifest_path(data).parent / "speakers.json"
    if info_path.is_file():
        info = json.loads(info_path.read_text())
        return seen or info["seen"], [s for s in info["unseen"] if s not in (seen or ())]
    return seen or list(PATS_SEEN_SPEAKERS), [s for s in PATS_UNSEEN_SPEAKERS if s not in (seen or ())]


def _load_poses(path: str | Path) -> list[np.ndarray]:
    """Poses from a ``.npy`` file, an interval file, or every such file in a directory."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"not found: {path}")
    files = [path] if path.is_file() else sorted(
        p for p in path.iterdir() if p.suffix in (POSE_SUFFIX, *INTERVAL_SUFFIXES))
    poses = []
    for p in files:
        if p.suffix == POSE_SUFFIX:
            arr = np.load(p)
            if arr.ndim != 2:
                raise DimensionMismatch(f"{p}: pose must be 2-D, got shape {arr.shape}")
            poses.append(arr.astype(np.float64))
        else:
            poses.append(read_interval(p).pose.astype(np.float64))
    if not poses:
        raise EmptyInput(f"no pose or interval files in {path}")
    return poses


def _interval_files(path: str | Path) -> list[Path]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"not found: {path}")
    if path.is_file():
        return [path]
    files = sorted(p for p in path.iterdir() if p.suffix in INTERVAL_SUFFIXES)
    if not files:
        raise EmptyInput(f"no interval files in {path}")
    return files


def _load_model(path: str | Path):
    from .checkpoint import load_checkpoint

    if not Path(path).is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    return ckpt.build_model(), ckpt.stats


# ---------------------------------------------------------------- subcommands

def cmd_synth_data(cfg: dict) -> dict:
    synth = SynthConfig(J=cfg["J"], T=cfg["T"], n_mels=cfg["n_mels"], d_text=cfg["d_text"],
                        n_classes=cfg["n_classes"], fps=cfg["fps"], text_noise=cfg["text_noise"],
                        mel_noise=cfg["mel_noise"], style_leak=cfg["style_leak"])
    if cfg["format"] not in ("zsi", "csv"):
        raise ConfigError("format must be zsi or csv")
    try:
        manifest = gen_dataset(cfg["out"], cfg["n_seen"], cfg["n_unseen"], cfg["samples_per_speaker"],
                               cfg["seed"], synth, valid_fraction=cfg["valid_fraction"],
                               test_fraction=cfg["test_fraction"], fmt=cfg["format"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    log.info("wrote %d intervals for %d speakers to %s", len(manifest.entries), len(manifest.speakers), cfg["out"])
    return {"n_intervals": len(manifest.entries)}


def model_config_from(cfg: dict, manifest) -> ModelConfig:
    values = {}
    for f in fields(ModelConfig):
        v = cfg.get(f.name)
        if f.name in _MANIFEST_DIMS:
            declared = getattr(manifest, f.name)
            if v is not None and v != declared:
                raise DimensionMismatch(f"{f.name}={v} but the manifest declares {declared}")
            v = declared
        values[f.name] = v
    return ModelConfig(**values).validate()


def cmd_train(cfg: dict) -> dict:
    torch.set_num_threads(cfg["threads"])
    torch.use_deterministic_algorithms(True)
    tcfg = TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig) if f.name != "seed"}, seed=cfg["seed"])
    tcfg.validate()
    manifest = load_manifest(_manifest_path(cfg["data"]))
    seen, unseen = _speaker_lists(cfg["data"], cfg["seen"])
    split = split_speakers(manifest, seen, [s for s in unseen if s in manifest.speakers])
    train_raw = [s for s in manifest.load(split="train") if s.speaker_id in set(seen)]
    valid_raw = [s for s in manifest.load(split="valid") if s.speaker_id in set(seen)]
    if not train_raw:
        raise EmptyInput("no training intervals for the seen speakers")
    log.info("train %d intervals, valid %d, speakers %s", len(train_raw), len(valid_raw), sorted(split.speakers("train")))

    out = Path(cfg["out"])
    last = out / "last.ckpt"
    if cfg["resume"] and last.is_file():
        trainer = Trainer.resume(last, tcfg)
        stats = trainer.stats
    else:
        if (out / "metrics.csv").exists():
            raise ConfigError(f"{out} already holds a run; pass --resume or pick a new --out")
        mcfg = model_config_from(cfg, manifest)
        stats = fit_normalization(train_raw)
        torch.manual_seed(cfg["seed"])
        trainer = Trainer(ZSMSTM(mcfg), tcfg, stats)
    train = [normalize(s, stats) for s in train_raw]
    valid = [normalize(s, stats) for s in valid_raw]
    state = fit(trainer, train, valid, out, tcfg.epochs)
    return {"steps": state.step, "best_valid": state.best_valid, "best_step": state.best_step,
            "model_config": trainer.model.cfg.to_dict(), "train_config": tcfg.to_dict()}


def cmd_extract_style(cfg: dict) -> dict:
    from .inference import build_style_bank

    model, stats = _load_model(cfg["checkpoint"])
    manifest = load_manifest(_manifest_path(cfg["data"]))
    speakers = cfg["speakers"] or manifest.speakers
    split = None if cfg["split"] == "all" else cfg["split"]
    bank = build_style_bank(model, manifest, speakers, stats, split)
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    bank.save(cfg["out"])
    return {"speakers": list(bank.embeddings), "counts": bank.counts}


def _target_style(cfg: dict, model, stats) -> np.ndarray:
    from .inference import StyleBank, extract_style

    if cfg["style_file"]:
        if not Path(cfg["style_file"]).is_file():
            raise MissingFile(f"style file not found: {cfg['style_file']}")
        bank = StyleBank.load(cfg["style_file"])
        if cfg["target_speaker"]:
            return bank[cfg["target_speaker"]]
        if len(bank) != 1:
            raise ConfigError("style bank holds several speakers; pass --target-speaker")
        return next(iter(bank.embeddings.values()))
    if not (cfg["target_speaker"] and cfg["data"]):
        raise ConfigError("need --style-file, or --target-speaker with --data")
    manifest = load_manifest(_manifest_path(cfg["data"]))
    split = None if cfg["style_split"] == "all" else cfg["style_split"]
    if cfg["target_speaker"] not in manifest.speakers:
        raise UnknownSpeaker(f"speaker {cfg['target_speaker']!r} not in manifest")
    return extract_style(model, manifest.load(cfg["target_speaker"], split), stats)


def cmd_transfer(cfg: dict) -> dict:
    from .inference import transfer

    model, stats = _load_model(cfg["checkpoint"])
    style = _target_style(cfg, model, stats)
    if cfg["source_speaker"]:
        if not cfg["data"]:
            raise ConfigError("--source-speaker needs --data")
        manifest = load_manifest(_manifest_path(cfg["data"]))
        split = None if cfg["source_split"] == "all" else cfg["source_split"]
        files = manifest.paths(cfg["source_speaker"], split)
        if not files:
            raise EmptyInput(f"no {split} intervals for {cfg['source_speaker']}")
    elif cfg["source"]:
        files = _interval_files(cfg["source"])
    else:
        raise ConfigError("need --source or --source-speaker")
    sources: list[Sample] = [read_interval(p) for p in files]
    preds = transfer(model, sources, style, stats)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for path, pose in zip(files, preds):
        np.save(out / (path.stem + POSE_SUFFIX), pose)
    return {"n_outputs": len(preds)}


def plot_report(report, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report.source_pct)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(x - 0.2, [report.source_pct[n] for n in names], 0.4, label="Dist(Source, Target)")
    ax.bar(x + 0.2, [report.model_pct[n] for n in names], 0.4, label="Dist(Model, Target)")
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("% of total distance")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def cmd_metrics(cfg: dict) -> dict:
    wrists = tuple(cfg["wrists"])
    means = {k: metrics_report(_load_poses(cfg[k]), cfg["fps"], wrists=wrists).mean()
             for k in ("source", "target", "pred")}
    report = distance_report(means["source"], means["target"], means["pred"])
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(cfg["out"])
    if cfg["plot"]:
        plot_report(report, cfg["plot"])
    return {"model_pct": {m: report.model_pct[m] for m in METRIC_NAMES}}


def cmd_export_body25(cfg: dict) -> dict:
    if not Path(cfg["pred"]).is_file():
        raise MissingFile(f"pose file not found: {cfg['pred']}")
    (pose,) = _load_poses(cfg["pred"])
    joint_map = tuple(cfg["joint_map"])
    check_joint_map(joint_map, pose.shape[1] // 2)
    out = export_pose(pose, cfg["out"], tuple(cfg["resolution"]), joint_map)
    return {"n_frames": len(out["json"])}


COMMANDS: dict[str, tuple[list[Option], Callable[[dict], dict], str]] = {
    "synth-data": (SYNTH_OPTIONS, cmd_synth_data, "generate a synthetic multi-speaker dataset"),
    "train": (TRAIN_OPTIONS, cmd_train, "train a model on the seen speakers of a dataset"),
    "extract-style": (EXTRACT_OPTIONS, cmd_extract_style, "average style embeddings into a style bank"),
    "transfer": (TRANSFER_OPTIONS, cmd_transfer, "generate source content in a target speaker's style"),
    "metrics": (METRICS_OPTIONS, cmd_metrics, "source/model distance report against a target"),
    "export-body25": (EXPORT_OPTIONS, cmd_export_body25, "write OpenPose BODY25 JSON and CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsmstm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (options, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value config file; flags override it")
        for o in (*COMMON, *options):
            shown = ",".join(map(str, o.default)) if isinstance(o.default, (list, tuple)) else o.default
            if name == "export-body25" and o.key == "resolution":
                shown = "x".join(map(str, o.default))
            p.add_argument(o.flag, dest=o.key, type=o.type, default=None, metavar=o.key.upper(),
                           help=f"{o.help} (default: {shown})")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    options, fn, _ = COMMANDS[args.command]
    flags = vars(args)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve([*COMMON, *options], file_values, flags)
        missing = [k for k in REQUIRED[args.command] if not cfg.get(k)]
        if missing:
            raise ConfigError("missing required settings: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    except ZSMSTMError as e:
        print(f"zsmstm: error: {e}", file=sys.stderr)
        return e.exit_code
    if args.config:
        cfg["config"] = args.config
    logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        extra = fn(cfg)
    except ZSMSTMError as e:
        write_run_record(args.command, cfg, "error", f"{type(e).__name__}: {e}", e.exit_code)
        print(f"zsmstm: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        write_run_record(args.command, cfg, "error", f"{type(e).__name__}: {e}", 1)
        raise
    write_run_record(args.command, cfg, "ok", extra={"result": extra})
    return 0


if __name__ == "__main__":
    sys.exit(main())
