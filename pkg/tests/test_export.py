import json

import numpy as np
import pytest

from zsmstm.errors import BadMapping
from zsmstm.export import (
    BODY25_NAMES,
    DEFAULT_JOINT_MAP,
    DEFAULT_RESOLUTION,
    Body25Frame,
    export_pose,
    extract_from_body25,
    map_to_body25,
    pose_to_frames,
    read_csv,
    read_json,
    write_csv,
    write_json,
)

UNMAPPED = list(range(8, 15)) + list(range(19, 25))


def test_default_map_names():
    names = [BODY25_NAMES[i] for i in DEFAULT_JOINT_MAP]
    assert names == ["Nose", "Neck", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow", "LWrist",
                     "REye", "LEye"]
    assert len(BODY25_NAMES) == 25


def test_map_zero_fills_lower_body():
    frame = map_to_body25(np.random.default_rng(0).uniform(size=20))
    assert frame.keypoints.shape == (25, 3)
    assert np.all(frame.keypoints[UNMAPPED] == 0.0)
    assert np.all(frame.keypoints[list(DEFAULT_JOINT_MAP), 2] == 1.0)


def test_map_round_trip():
    x = np.random.default_rng(1).uniform(size=20)
    np.testing.assert_array_equal(extract_from_body25(map_to_body25(x)), x)


@pytest.mark.parametrize("joint_map", [(0, 0, 1), (0, 1, 25), (0, 1)])
def test_bad_mapping(joint_map):
    with pytest.raises(BadMapping):
        map_to_body25(np.zeros(6), joint_map)


def test_json_files(tmp_path):
    pose = np.random.default_rng(2).uniform(size=(64, 20))
    paths = write_json(pose_to_frames(pose), tmp_path)
    assert len(paths) == 64
    assert paths[0].name == "frame_000000_keypoints.json" and paths[-1].name == "frame_000063_keypoints.json"
    doc = json.loads(paths[5].read_text())
    flat = doc["people"][0]["pose_keypoints_2d"]
    assert len(flat) == 75
    kp = np.asarray(flat).reshape(25, 3)
    assert np.all(kp[UNMAPPED] == 0)
    np.testing.assert_allclose(kp[0, :2], pose[5, :2] * DEFAULT_RESOLUTION, atol=5e-7)


def test_zero_frame(tmp_path):
    (path,) = write_json([Body25Frame(np.zeros((25, 3)))], tmp_path)
    flat = json.loads(path.read_text())["people"][0]["pose_keypoints_2d"]
    assert flat == [0.0] * 75


def test_csv_scaling(tmp_path):
    pose = np.full((3, 20), 0.5)
    write_csv(pose_to_frames(pose), tmp_path / "k.csv")
    rows = read_csv(tmp_path / "k.csv")
    assert rows.shape == (3, 25, 3)
    np.testing.assert_array_equal(rows[:, 0, :2], [[960.0, 540.0]] * 3)
    header = (tmp_path / "k.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["Nose_x", "Nose_y", "Nose_c"] and len(header) == 75


def test_csv_rejects_bad_resolution(tmp_path):
    with pytest.raises(ValueError):
        write_csv([], tmp_path / "k.csv", (0, 1080))


def test_json_and_csv_agree(tmp_path):
    pose = np.random.default_rng(3).uniform(size=(8, 20))
    out = export_pose(pose, tmp_path)
    table = read_csv(out["csv"])
    for i, p in enumerate(out["json"]):
        np.testing.assert_allclose(read_json(p), table[i], atol=1e-6)


def test_byte_identical_reemission(tmp_path):
    pose = np.random.default_rng(4).uniform(size=(6, 20))
    export_pose(pose, tmp_path / "a")
    export_pose(pose, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
