"""BODY25-compatible JSON/CSV export of generated 2D poses.

Modeled joints are placed at their BODY25 slots with confidence 1.0; every
other slot is written as (0, 0, 0). Pose coordinates are fractions of the
frame size and are scaled to pixels on export.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import BadMapping, DimensionMismatch

BODY25_NAMES = (
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow", "LWrist",
    "MidHip", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
    "REye", "LEye", "REar", "LEar", "LBigToe", "LSmallToe", "LHeel",
    "RBigToe", "RSmallToe", "RHeel",
)
N_KEYPOINTS = 25

# modeled joint index -> BODY25 index, for the default 10-joint upper body
DEFAULT_JOINT_MAP = (0, 1, 2, 3, 4, 5, 6, 7, 15, 16)
DEFAULT_RESOLUTION = (1920, 1080)


@dataclass
class Body25Frame:
    keypoints: np.ndarray  # [25, 3] of (x, y, confidence)

    def flat(self) -> list[float]:
        return [float(v) for v in self.keypoints.reshape(-1)]


def check_joint_map(joint_map: Sequence[int], J: int) -> None:
    if len(joint_map) != J:
        raise BadMapping(f"joint map has {len(joint_map)} entries for J={J}")
    if len(set(joint_map)) != len(joint_map):
        raise BadMapping("joint map is not injective")
    if any(not 0 <= int(i) < N_KEYPOINTS for i in joint_map):
        raise BadMapping("joint map index outside [0, 25)")


def map_to_body25(pose_frame: np.ndarray, joint_map: Sequence[int] = DEFAULT_JOINT_MAP) -> Body25Frame:
    xy = np.asarray(pose_frame, dtype=np.float64).reshape(-1, 2)
    check_joint_map(joint_map, xy.shape[0])
    kp = np.zeros((N_KEYPOINTS, 3))
    kp[list(joint_map), :2] = xy
    kp[list(joint_map), 2] = 1.0
    return Body25Frame(kp)


def extract_from_body25(frame: Body25Frame, joint_map: Sequence[int] = DEFAULT_JOINT_MAP) -> np.ndarray:
    return frame.keypoints[list(joint_map), :2].reshape(-1)


def pose_to_frames(pose: np.ndarray, joint_map: Sequence[int] = DEFAULT_JOINT_MAP) -> list[Body25Frame]:
    pose = np.asarray(pose)
    if pose.ndim != 2:
        raise DimensionMismatch(f"pose must be [T, 2J], got {pose.shape}")
    return [map_to_body25(row, joint_map) for row in pose]


def to_pixels(frame: Body25Frame, resolution: tuple[int, int]) -> np.ndarray:
    w, h = resolution
    kp = frame.keypoints.copy()
    kp[:, 0] *= w
    kp[:, 1] *= h
    return kp


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_json(frames: Sequence[Body25Frame], out_dir: str | Path,
               resolution: tuple[int, int] = DEFAULT_RESOLUTION) -> list[Path]:
    """One OpenPose-style detection file per frame, pixel coordinates, 6 decimals."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        flat = to_pixels(frame, resolution).reshape(-1)
        # json.dumps cannot emit fixed-precision floats, so the array is spliced in as text
        body = ", ".join(_fmt(v) for v in flat)
        doc = json.dumps({"version": 1.3, "people": [{"person_id": [-1], "pose_keypoints_2d": "@@"}]})
        path = out_dir / f"frame_{i:06d}_keypoints.json"
        path.write_text(doc.replace('"@@"', f"[{body}]") + "\n", encoding="utf-8")
        paths.append(path)
    return paths


def read_json(path: str | Path) -> np.ndarray:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    people = data.get("people") or []
    if not people:
        return np.zeros((N_KEYPOINTS, 3))
    return np.asarray(people[0]["pose_keypoints_2d"], dtype=np.float64).reshape(N_KEYPOINTS, 3)


def csv_header() -> list[str]:
    return [f"{name}_{c}" for name in BODY25_NAMES for c in ("x", "y", "c")]


def write_csv(frames: Sequence[Body25Frame], path: str | Path,
              resolution: tuple[int, int] = DEFAULT_RESOLUTION) -> Path:
    if resolution[0] <= 0 or resolution[1] <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header())
        for frame in frames:
            w.writerow([_fmt(v) for v in to_pixels(frame, resolution).reshape(-1)])
    return path


def read_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), N_KEYPOINTS, 3)


def export_pose(pose: np.ndarray, out_dir: str | Path, resolution: tuple[int, int] = DEFAULT_RESOLUTION,
                joint_map: Sequence[int] = DEFAULT_JOINT_MAP) -> Mapping[str, object]:
    frames = pose_to_frames(pose, joint_map)
    out_dir = Path(out_dir)
    json_paths = write_json(frames, out_dir / "json", resolution)
    csv_path = write_csv(frames, out_dir / "keypoints.csv", resolution)
    return {"json": json_paths, "csv": csv_path}
