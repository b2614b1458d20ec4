import json
from pathlib import Path

import numpy as np
import pytest

from zsmstm.cli import build_parser, main, read_config_file, resolve, TRAIN_OPTIONS, COMMON
from zsmstm.errors import ConfigError
from zsmstm.metrics import read_report_csv

TINY_CFG = """\
# tiny desk model
d_model = 16
speech_layers = 1
speech_heads = 2
ff_mult = 2
max_mel_frames = 128
initial_lr = 3e-3
warmup_steps = 20
batch_size = 8
epochs = 2
"""

SYNTH = ["--n-seen", "2", "--n-unseen", "1", "--samples-per-speaker", "10", "--T", "32", "--n-mels", "32",
         "--d-text", "16", "--seed", "5"]


def pipeline(root: Path) -> Path:
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data, run = root / "data", root / "run"
    assert main(["synth-data", "--out", str(data), *SYNTH]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--seed", "1"]) == 0
    assert main(["extract-style", "--checkpoint", str(run / "best.ckpt"), "--data", str(data),
                 "--out", str(root / "bank.zsb")]) == 0
    assert main(["transfer", "--checkpoint", str(run / "best.ckpt"), "--data", str(data), "--source-speaker", "spk000",
                 "--style-file", str(root / "bank.zsb"), "--target-speaker", "spk002", "--out", str(root / "pred")]) == 0
    assert main(["metrics", "--pred", str(root / "pred"), "--source", str(data / "spk000"),
                 "--target", str(data / "spk002"), "--fps", "15", "--out", str(root / "report.csv")]) == 0
    return root


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return [pipeline(tmp_path_factory.mktemp(f"run{i}")) for i in range(2)]


def test_end_to_end_artifacts(runs):
    root = runs[0]
    for rel in ("data/manifest.tsv", "data/speakers.json", "data/run.json", "run/metrics.csv", "run/valid.csv",
                "run/best.ckpt", "run/last.ckpt", "run/run.json", "bank.zsb", "bank.zsb.run.json",
                "pred/run.json", "report.csv", "report.csv.run.json"):
        assert (root / rel).exists(), rel
    assert len(list((root / "pred").glob("*.npy"))) == 2
    record = json.loads((root / "run" / "run.json").read_text())
    assert record["status"] == "ok" and record["seed"] == 1
    assert record["config"]["d_model"] == 16 and record["result"]["model_config"]["T"] == 32
    assert set(record["inputs"]) == {"data", "config"} and len(record["inputs"]["data"]["sha256"]) == 64
    assert set(record["versions"]) >= {"zsmstm", "numpy", "torch", "python"}


def test_determinism(runs):
    a, b = runs
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    strip = lambda p: [",".join(line.split(",")[:-1]) for line in p.read_text().splitlines()]
    assert strip(a / "run" / "metrics.csv") == strip(b / "run" / "metrics.csv")
    for f in sorted((a / "pred").glob("*.npy")):
        assert f.read_bytes() == (b / "pred" / f.name).read_bytes()


def test_identical_pred_and_target(runs, tmp_path):
    data = runs[0] / "data"
    out = tmp_path / "r.csv"
    assert main(["metrics", "--pred", str(data / "spk001"), "--source", str(data / "spk000"),
                 "--target", str(data / "spk001"), "--out", str(out), "--plot", str(tmp_path / "r.png")]) == 0
    report = read_report_csv(out)
    assert all(row["model_pct"] == 0.0 for row in report.values())
    assert (tmp_path / "r.png").stat().st_size > 0


def test_export(runs, tmp_path):
    pred = sorted((runs[0] / "pred").glob("*.npy"))[0]
    assert main(["export-body25", "--pred", str(pred), "--out", str(tmp_path / "b"), "--resolution", "640x480"]) == 0
    frames = sorted((tmp_path / "b" / "json").glob("frame_*_keypoints.json"))
    assert len(frames) == np.load(pred).shape[0]
    assert (tmp_path / "b" / "keypoints.csv").exists() and (tmp_path / "b" / "run.json").exists()


def test_transfer_from_file(runs, tmp_path):
    root = runs[0]
    src = sorted((root / "data" / "spk000").iterdir())[0]
    assert main(["transfer", "--checkpoint", str(root / "run" / "best.ckpt"), "--source", str(src),
                 "--target-speaker", "spk001", "--data", str(root / "data"), "--out", str(tmp_path / "p")]) == 0
    assert np.load(tmp_path / "p" / (src.stem + ".npy")).shape == (32, 20)


class TestExitCodes:
    def test_missing_data_is_3_and_records(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert code == 3
        record = json.loads((tmp_path / "o" / "run.json").read_text())
        assert record["status"] == "error" and record["exit_code"] == 3 and "MissingFile" in record["error"]

    def test_bad_config_is_2(self, tmp_path, runs):
        assert main(["train", "--data", str(runs[0] / "data"), "--out", str(tmp_path / "o"),
                     "--beta1", "1.5"]) == 2

    def test_unknown_config_key_is_2(self, tmp_path):
        cfg = tmp_path / "x.cfg"
        cfg.write_text("no_such_key = 1\n")
        assert main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2

    def test_missing_required_is_2(self):
        assert main(["metrics", "--pred", "x"]) == 2

    def test_divergence_is_4(self, tmp_path, runs):
        code = main(["train", "--data", str(runs[0] / "data"), "--out", str(tmp_path / "o"), "--d-model", "16",
                     "--speech-layers", "1", "--speech-heads", "2", "--max-mel-frames", "128", "--epochs", "1",
                     "--initial-lr", "1e30", "--warmup-steps", "1"])
        assert code == 4
        assert json.loads((tmp_path / "o" / "run.json").read_text())["exit_code"] == 4


class TestConfigResolution:
    def test_precedence(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("epochs = 7\nbatch_size = 3\n")
        cfg = resolve([*COMMON, *TRAIN_OPTIONS], read_config_file(f), {"epochs": 9, "data": None}, env={})
        assert (cfg["epochs"], cfg["batch_size"], cfg["beta1"]) == (9, 3, 0.95)

    def test_env_overrides_paths_only(self):
        env = {"ZSMSTM_DATA_ROOT": "/data/pats"}
        cfg = resolve([*COMMON, *TRAIN_OPTIONS], {}, {}, env=env)
        assert cfg["data"] == "/data/pats" and cfg["epochs"] == 200

    def test_bad_value(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("epochs = many\n")
        with pytest.raises(ConfigError):
            resolve([*COMMON, *TRAIN_OPTIONS], read_config_file(f), {}, env={})

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--help"])
        text = " ".join(capsys.readouterr().out.split())
        assert "(default: 0.95)" in text and "full scale: 20000" in text and "(default: 24)" in text
