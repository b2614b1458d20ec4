"""Parametric multi-speaker datasets with known style factors.

Each synthetic speaker has a gesture amplitude, an oscillation frequency, a
resting posture, a smoothing factor and a voice band. Pose trajectories are
built so that the expressivity metrics respond to exactly these factors:
amplitude drives bounding box and speed, frequency and smoothness drive
velocity/jerk. Text vectors carry only the per-word content class unless
``style_leak`` is set.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, Sample, WordFeature, write_interval, write_manifest
from .errors import ScriptMismatch

JOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist", "r_eye", "l_eye",
)
WRIST_JOINTS = (4, 7)

# resting skeleton in normalized screen coordinates (y grows downwards)
_CANONICAL = np.array([
    (0.50, 0.25), (0.50, 0.35), (0.42, 0.36), (0.38, 0.50), (0.40, 0.62),
    (0.58, 0.36), (0.62, 0.50), (0.60, 0.62), (0.48, 0.23), (0.52, 0.23),
])
_MOTION_WEIGHT = np.array([0.1, 0.1, 0.15, 0.5, 1.0, 0.15, 0.5, 1.0, 0.1, 0.1])

AMPLITUDE_RANGE = (0.5, 2.0)
FREQUENCY_RANGE = (0.75, 1.5)
SMOOTHNESS_RANGE = (0.4, 1.0)
BASE_EXTENT = 0.06  # wrist excursion at amplitude 1
_CLASS_SEED = 12345


@dataclass
class SpeakerStyleParams:
    amplitude_scale: float
    base_frequency: float
    posture_offset: np.ndarray  # [2J]
    smoothness: float
    voice_pitch_band: int
    seed: int = 0

    def __post_init__(self):
        self.posture_offset = np.asarray(self.posture_offset, dtype=np.float64)
        if self.amplitude_scale <= 0:
            raise ValueError("amplitude_scale must be > 0")
        if not 0 < self.smoothness <= 1:
            raise ValueError("smoothness must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["posture_offset"] = self.posture_offset.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerStyleParams":
        return cls(**d)


@dataclass
class ContentScript:
    classes: list[int]
    durations: list[int]

    @property
    def W(self) -> int:
        return len(self.classes)

    @property
    def T(self) -> int:
        return int(sum(self.durations))

    def alignment(self) -> list[tuple[int, int]]:
        ends = np.cumsum(self.durations)
        starts = ends - np.asarray(self.durations)
        return [(int(s), int(e)) for s, e in zip(starts, ends)]


@dataclass
class SynthConfig:
    J: int = 10
    T: int = 64
    n_mels: int = 128
    d_text: int = 768
    n_classes: int = 8
    fps: float = 15.0
    words_range: tuple[int, int] = (3, 8)
    mel_frames_per_pose_frame: int = 4
    min_mel_frames: int = 16
    text_noise: float = 0.05
    mel_noise: float = 0.02
    style_leak: bool = False


def canonical_posture(J: int, rng: np.random.Generator | None = None) -> np.ndarray:
    base = np.zeros((J, 2))
    k = min(J, len(_CANONICAL))
    base[:k] = _CANONICAL[:k]
    if J > k:
        rng = rng or np.random.default_rng(0)
        base[k:] = rng.uniform(0.35, 0.65, size=(J - k, 2))
    return base.reshape(-1)


def motion_weights(J: int) -> np.ndarray:
    w = np.full(J, 0.3)
    k = min(J, len(_MOTION_WEIGHT))
    w[:k] = _MOTION_WEIGHT[:k]
    return w


def gen_speaker(seed: int, J: int = 10, n_mels: int = 128,
                amplitude_range: tuple[float, float] = AMPLITUDE_RANGE,
                frequency_range: tuple[float, float] = FREQUENCY_RANGE,
                smoothness_range: tuple[float, float] = SMOOTHNESS_RANGE) -> SpeakerStyleParams:
    rng = np.random.default_rng([seed, 7919])
    margin = min(8, n_mels // 4)
    return SpeakerStyleParams(
        amplitude_scale=float(rng.uniform(*amplitude_range)),
        base_frequency=float(rng.uniform(*frequency_range)),
        posture_offset=canonical_posture(J) + rng.normal(0.0, 0.015, size=2 * J),
        smoothness=float(rng.uniform(*smoothness_range)),
        voice_pitch_band=int(rng.integers(margin, n_mels - margin)),
        seed=seed,
    )


def gen_script(seed: int, cfg: SynthConfig = SynthConfig()) -> ContentScript:
    rng = np.random.default_rng([seed, 104729])
    lo, hi = cfg.words_range
    W = int(rng.integers(lo, min(hi, cfg.T) + 1))
    # random composition of T into W positive parts
    cuts = np.sort(rng.choice(np.arange(1, cfg.T), size=W - 1, replace=False)) if W > 1 else np.array([], int)
    bounds = np.concatenate([[0], cuts, [cfg.T]])
    return ContentScript(
        classes=[int(c) for c in rng.integers(0, cfg.n_classes, size=W)],
        durations=[int(d) for d in np.diff(bounds)],
    )


def class_text_centroids(n_classes: int, d_text: int) -> np.ndarray:
    rng = np.random.default_rng(_CLASS_SEED)
    return rng.normal(0.0, 1.0, size=(n_classes, d_text))


def class_motion_patterns(n_classes: int, J: int) -> np.ndarray:
    """Per-class [2J] excursion directions, weighted towards the arms."""
    rng = np.random.default_rng(_CLASS_SEED + 1)
    angles = rng.uniform(0, 2 * np.pi, size=(n_classes, J))
    gain = rng.uniform(0.6, 1.0, size=(n_classes, 1))
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # [C, J, 2]
    return (dirs * (gain * motion_weights(J))[..., None]).reshape(n_classes, 2 * J)


def oscillation(style: SpeakerStyleParams, script: ContentScript, J: int, n_classes: int,
                fps: float) -> np.ndarray:
    """Offset-free motion: amplitude * class pattern * sin(2 pi f t), then EMA low-pass."""
    T = script.T
    patterns = class_motion_patterns(n_classes, J)
    cls = np.repeat(np.asarray(script.classes), script.durations)
    t = np.arange(T) / fps
    raw = patterns[cls] * np.sin(2 * np.pi * style.base_frequency * t)[:, None]
    raw *= BASE_EXTENT * style.amplitude_scale
    if style.smoothness >= 1.0:
        return raw
    out = np.empty_like(raw)
    out[0] = raw[0]
    for i in range(1, T):
        out[i] = style.smoothness * raw[i] + (1.0 - style.smoothness) * out[i - 1]
    return out


def gen_sample(style: SpeakerStyleParams, script: ContentScript, seed: int,
               cfg: SynthConfig = SynthConfig(), speaker_id: str = "synthetic") -> Sample:
    if script.T != cfg.T or any(d < 1 for d in script.durations) or script.W < 1:
        raise ScriptMismatch(f"script covers {script.T} frames, expected {cfg.T}")
    if len(script.classes) != len(script.durations):
        raise ScriptMismatch("classes and durations differ in length")
    J = style.posture_offset.shape[0] // 2
    if J != cfg.J:
        raise ScriptMismatch(f"speaker has J={J}, config J={cfg.J}")
    rng = np.random.default_rng([seed, 15485863])

    pose = style.posture_offset + oscillation(style, script, J, cfg.n_classes, cfg.fps)

    centroids = class_text_centroids(cfg.n_classes, cfg.d_text)
    leak = None
    if cfg.style_leak:
        leak = np.random.default_rng([style.seed, 31337]).normal(0.0, 0.5, size=cfg.d_text)

    f = np.arange(cfg.n_mels)
    width = max(1.0, cfg.n_mels / 32)
    voice = np.exp(-0.5 * ((f - style.voice_pitch_band) / width) ** 2)
    words = []
    for c, dur in zip(script.classes, script.durations):
        text = centroids[c] + rng.normal(0.0, cfg.text_noise, size=cfg.d_text)
        if leak is not None:
            text = text + leak
        tw = max(cfg.min_mel_frames, dur * cfg.mel_frames_per_pose_frame)
        tt = np.arange(tw) / tw
        envelope = 1.0 + 0.5 * np.sin(2 * np.pi * (c + 1) * tt)
        formant_band = (c + 0.5) * cfg.n_mels / cfg.n_classes
        formant = 0.5 * np.exp(-0.5 * ((f - formant_band) / width) ** 2)
        mel = envelope[:, None] * (voice + formant)[None, :]
        mel = mel + rng.normal(0.0, cfg.mel_noise, size=mel.shape)
        words.append(WordFeature(text.astype(np.float32), mel.astype(np.float32)))
    return Sample(speaker_id, words, pose.astype(np.float32), script.alignment(),
                  meta={"fps": cfg.fps, "classes": list(script.classes)})


def speaker_name(i: int) -> str:
    return f"spk{i:03d}"


def gen_dataset(out_dir: str | Path, n_seen: int, n_unseen: int, samples_per_speaker: int,
                seed: int = 0, cfg: SynthConfig = SynthConfig(),
                styles: Sequence[SpeakerStyleParams] | None = None,
                valid_fraction: float = 0.1, test_fraction: float = 0.2,
                fmt: str = "zsi") -> DatasetManifest:
    """Write interval files, ``manifest.tsv`` and ``speakers.json`` under ``out_dir``.

    Speakers ``spk000..`` are seen, the last ``n_unseen`` are unseen; every
    speaker gets train/valid/test intervals so the manifest mirrors PATS.
    """
    if min(n_seen, n_unseen, samples_per_speaker) < 1:
        raise ValueError("all counts must be >= 1")
    n = n_seen + n_unseen
    if styles is None:
        styles = [gen_speaker(seed * 1000 + i, cfg.J, cfg.n_mels) for i in range(n)]
    if len(styles) != n:
        raise ValueError(f"need {n} styles, got {len(styles)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_test = max(1, round(samples_per_speaker * test_fraction))
    n_valid = round(samples_per_speaker * valid_fraction)
    if n_test + n_valid >= samples_per_speaker:
        n_valid = max(0, samples_per_speaker - n_test - 1)
    entries = []
    for i, style in enumerate(styles):
        spk = speaker_name(i)
        (out_dir / spk).mkdir(exist_ok=True)
        for k in range(samples_per_speaker):
            item_seed = seed * 10_000_019 + i * 100_003 + k
            sample = gen_sample(style, gen_script(item_seed, cfg), item_seed, cfg, speaker_id=spk)
            rel = f"{spk}/{k:05d}.{fmt}"
            write_interval(sample, out_dir / rel)
            split = "test" if k < n_test else "valid" if k < n_test + n_valid else "train"
            entries.append((spk, split, rel))
    manifest = DatasetManifest(out_dir, entries, cfg.d_text, cfg.n_mels, cfg.J, cfg.T, cfg.fps)
    write_manifest(manifest, out_dir / "manifest.tsv")
    info = {
        "seed": seed,
        "seen": [speaker_name(i) for i in range(n_seen)],
        "unseen": [speaker_name(i) for i in range(n_seen, n)],
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "speakers": {speaker_name(i): s.to_dict() for i, s in enumerate(styles)},
    }
    (out_dir / "speakers.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return manifest


def load_speaker_info(data_dir: str | Path) -> dict:
    info = json.loads((Path(data_dir) / "speakers.json").read_text())
    info["speakers"] = {k: SpeakerStyleParams.from_dict(v) for k, v in info["speakers"].items()}
    return info
