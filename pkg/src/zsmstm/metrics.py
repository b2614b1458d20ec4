"""Behaviour-expressivity metrics and the source/target distance protocol.

Velocity, acceleration and jerk are mean per-joint 2D norms of the first,
second and third finite differences, scaled by fps, fps^2 and fps^3.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BadIndex, DimensionMismatch, TooShort

METRIC_NAMES = (
    "velocity", "acceleration", "jerk",
    "wrist_velocity", "wrist_acceleration", "wrist_jerk",
    "bbox_perimeter",
)
DEFAULT_WRISTS = (4, 7)


def _joints(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim != 2 or pose.shape[1] % 2:
        raise DimensionMismatch(f"pose must be [T, 2J], got {pose.shape}")
    return pose.reshape(pose.shape[0], -1, 2)


def _diff_norm(pose: np.ndarray, order: int, fps: float) -> float:
    p = _joints(pose)
    if p.shape[0] < order + 1:
        raise TooShort(f"need at least {order + 1} frames, got {p.shape[0]}")
    d = np.diff(p, n=order, axis=0)
    return float(np.linalg.norm(d, axis=-1).mean() * fps**order)


def velocity(pose: np.ndarray, fps: float = 15.0) -> float:
    return _diff_norm(pose, 1, fps)


def acceleration(pose: np.ndarray, fps: float = 15.0) -> float:
    return _diff_norm(pose, 2, fps)


def jerk(pose: np.ndarray, fps: float = 15.0) -> float:
    return _diff_norm(pose, 3, fps)


def select_joints(pose: np.ndarray, joints: Sequence[int]) -> np.ndarray:
    p = _joints(pose)
    J = p.shape[1]
    if len(joints) == 0 or any(not 0 <= j < J for j in joints):
        raise BadIndex(f"joint indices {list(joints)} invalid for J={J}")
    return p[:, list(joints)].reshape(p.shape[0], -1)


def wrist_metrics(pose: np.ndarray, fps: float = 15.0,
                  wrist_joint_indices: Sequence[int] = DEFAULT_WRISTS) -> tuple[float, float, float]:
    sub = select_joints(pose, wrist_joint_indices)
    return velocity(sub, fps), acceleration(sub, fps), jerk(sub, fps)


def bbox_perimeter(pose: np.ndarray) -> float:
    p = _joints(pose)
    if p.shape[0] < 1:
        raise TooShort("need at least 1 frame")
    extent = p.max(axis=1) - p.min(axis=1)  # [T, 2]
    return float((2.0 * extent.sum(axis=1)).mean())


def sequence_metrics(pose: np.ndarray, fps: float = 15.0,
                     wrists: Sequence[int] = DEFAULT_WRISTS) -> dict[str, float]:
    wv, wa, wj = wrist_metrics(pose, fps, wrists)
    return {
        "velocity": velocity(pose, fps),
        "acceleration": acceleration(pose, fps),
        "jerk": jerk(pose, fps),
        "wrist_velocity": wv,
        "wrist_acceleration": wa,
        "wrist_jerk": wj,
        "bbox_perimeter": bbox_perimeter(pose),
    }


@dataclass
class MetricsReport:
    """Per-sequence metrics plus their per-speaker means."""

    fps: float
    per_sequence: list[dict[str, float]] = field(default_factory=list)
    speakers: list[str] = field(default_factory=list)

    def mean(self, speaker: str | None = None) -> dict[str, float]:
        rows = [m for m, s in zip(self.per_sequence, self.speakers) if speaker is None or s == speaker]
        if not rows:
            raise ValueError(f"no sequences for speaker {speaker!r}")
        return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}

    def per_speaker(self) -> dict[str, dict[str, float]]:
        return {s: self.mean(s) for s in dict.fromkeys(self.speakers)}


def metrics_report(poses: Iterable[np.ndarray], fps: float = 15.0, speakers: Iterable[str] | None = None,
                   wrists: Sequence[int] = DEFAULT_WRISTS) -> MetricsReport:
    """Average per interval first; speaker aggregates are means over intervals."""
    poses = list(poses)
    speakers = list(speakers) if speakers is not None else ["all"] * len(poses)
    return MetricsReport(fps, [sequence_metrics(p, fps, wrists) for p in poses], speakers)


@dataclass
class DistanceReport:
    source_dist: dict[str, float]
    model_dist: dict[str, float]
    source_pct: dict[str, float]
    model_pct: dict[str, float]

    def rows(self) -> list[tuple[str, float, float, float, float]]:
        return [(m, self.source_dist[m], self.model_dist[m], self.source_pct[m], self.model_pct[m])
                for m in self.source_dist]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "source_dist", "model_dist", "source_pct", "model_pct"])
            for m, ds, dm, ps, pm in self.rows():
                w.writerow([m, repr(ds), repr(dm), repr(ps), repr(pm)])


def distance_report(source: Mapping[str, float], target: Mapping[str, float],
                    model: Mapping[str, float]) -> DistanceReport:
    """Share of |source - target| and |model - target| in their sum, per metric."""
    if not (set(source) == set(target) == set(model)):
        raise DimensionMismatch("metric sets differ")
    out = DistanceReport({}, {}, {}, {})
    for m in source:
        ds = abs(source[m] - target[m])
        dm = abs(model[m] - target[m])
        total = ds + dm
        out.source_dist[m], out.model_dist[m] = ds, dm
        if total == 0:
            out.source_pct[m] = out.model_pct[m] = 50.0
        else:
            out.source_pct[m] = 100.0 * (ds / total)
            out.model_pct[m] = 100.0 * (dm / total)
    return out


def read_report_csv(path: str | Path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {row["metric"]: {k: float(v) for k, v in row.items() if k != "metric"}
                for row in csv.DictReader(fh)}
