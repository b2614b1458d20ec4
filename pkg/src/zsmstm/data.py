"""Word-aligned multimodal intervals: on-disk formats, normalization, splits, batching.

An interval holds W words (text vector + mel segment each), a T x 2J pose
matrix and the word -> frame alignment. Two interchangeable file formats are
supported: a sectioned CSV text file (``.csv``) and a little-endian binary
file (``.zsi``) with a 16-byte magic header.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    AlignmentGap,
    DimensionMismatch,
    EmptyDataset,
    MalformedInterval,
    MalformedManifest,
    MissingFile,
    NonFiniteValue,
    OverlappingSplits,
    UnknownSpeaker,
)

# Speaker lists used for the seen / unseen conditions on PATS.
PATS_SEEN_SPEAKERS = (
    "Shelly", "Jon", "Fallon", "Bee", "Ellen", "Oliver", "Lec_cosmic", "Lec_hist",
    "Seth", "Conan", "Angelica", "Rock", "Noah", "Ytch_prof", "Lec_law", "Ytch_dating",
)
PATS_UNSEEN_SPEAKERS = ("Lec_evol", "Almaram", "Huckabee", "Ytch_charisma", "Minhaj", "Chemistry")

SPLITS = ("train", "valid", "test")
DEFAULT_BATCH_SIZE = 24
DATA_ROOT_ENV = "ZSMSTM_DATA_ROOT"

BINARY_MAGIC = b"ZSMSTM-IVL"  # 10 bytes; version + reserved pad the header to 16
BINARY_VERSION = 1
_HEADER = struct.Struct("<10sHI")  # magic, version, reserved -> 16 bytes
assert _HEADER.size == 16 and len(BINARY_MAGIC) == 10


@dataclass
class WordFeature:
    text_vec: np.ndarray  # [d_text]
    mel: np.ndarray  # [T_w, n_mels]


@dataclass
class Sample:
    speaker_id: str
    words: list[WordFeature]
    pose: np.ndarray  # [T, 2J], x/y interleaved per joint
    alignment: list[tuple[int, int]]  # W half-open frame spans
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.pose.shape[0]

    @property
    def J(self) -> int:
        return self.pose.shape[1] // 2

    @property
    def W(self) -> int:
        return len(self.words)

    def frame_to_word(self) -> np.ndarray:
        idx = np.empty(self.T, dtype=np.int64)
        for w, (s, e) in enumerate(self.alignment):
            idx[s:e] = w
        return idx


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str, str]]  # (speaker_id, split, relative path)
    d_text: int = 768
    n_mels: int = 128
    J: int = 10
    T: int = 64
    fps: float = 15.0

    @property
    def dims(self) -> tuple[int, int]:
        return self.d_text, self.n_mels

    @property
    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for spk, _, _ in self.entries:
            seen.setdefault(spk, None)
        return list(seen)

    def paths(self, speaker: str | None = None, split: str | None = None) -> list[Path]:
        return [
            self.root / rel
            for spk, spl, rel in self.entries
            if (speaker is None or spk == speaker) and (split is None or spl == split)
        ]

    def load(self, speaker: str | None = None, split: str | None = None) -> list[Sample]:
        return [parse_interval(p, self) for p in self.paths(speaker, split)]


@dataclass
class StreamStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray  # bool mask of zero-variance features


@dataclass
class NormalizationStats:
    pose: StreamStats
    mel: StreamStats
    text: StreamStats

    def streams(self) -> dict[str, StreamStats]:
        return {"pose": self.pose, "mel": self.mel, "text": self.text}


# ---------------------------------------------------------------- validation

def validate_alignment(alignment: Sequence[tuple[int, int]], T: int) -> None:
    """Raise AlignmentGap unless the spans are ordered and partition [0, T)."""
    if len(alignment) == 0:
        raise AlignmentGap("no word spans")
    cursor = 0
    for w, (s, e) in enumerate(alignment):
        if s != cursor:
            raise AlignmentGap(f"span {w} starts at {s}, expected {cursor}")
        if e <= s:
            raise AlignmentGap(f"span {w} is empty: [{s}, {e})")
        cursor = e
    if cursor != T:
        raise AlignmentGap(f"spans cover [0, {cursor}) but T = {T}")


def validate_sample(sample: Sample, d_text: int | None = None, n_mels: int | None = None,
                    J: int | None = None, T: int | None = None, min_mel_frames: int = 16) -> Sample:
    if sample.W < 1:
        raise MalformedInterval("interval has no words")
    if sample.pose.ndim != 2 or sample.pose.shape[0] < 1 or sample.pose.shape[1] < 2 or sample.pose.shape[1] % 2:
        raise MalformedInterval(f"pose must be [T, 2J], got {sample.pose.shape}")
    if T is not None and sample.T != T:
        raise DimensionMismatch(f"T = {sample.T}, expected {T}")
    if J is not None and sample.J != J:
        raise DimensionMismatch(f"J = {sample.J}, expected {J}")
    if len(sample.alignment) != sample.W:
        raise AlignmentGap(f"{len(sample.alignment)} spans for {sample.W} words")
    validate_alignment(sample.alignment, sample.T)
    if not np.all(np.isfinite(sample.pose)):
        raise NonFiniteValue("pose contains NaN/Inf")
    for w, word in enumerate(sample.words):
        if word.text_vec.ndim != 1 or word.mel.ndim != 2:
            raise MalformedInterval(f"word {w}: bad feature rank")
        if d_text is not None and word.text_vec.shape[0] != d_text:
            raise DimensionMismatch(f"word {w}: d_text = {word.text_vec.shape[0]}, expected {d_text}")
        if n_mels is not None and word.mel.shape[1] != n_mels:
            raise DimensionMismatch(f"word {w}: n_mels = {word.mel.shape[1]}, expected {n_mels}")
        if word.mel.shape[0] < min_mel_frames:
            raise MalformedInterval(f"word {w}: mel has {word.mel.shape[0]} frames, need >= {min_mel_frames}")
        if not (np.all(np.isfinite(word.text_vec)) and np.all(np.isfinite(word.mel))):
            raise NonFiniteValue(f"word {w}: features contain NaN/Inf")
    return sample


# ---------------------------------------------------------------- interval IO

def _fmt_row(row: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in row)


def write_interval_csv(sample: Sample, path: str | os.PathLike) -> None:
    lines = [
        "# zsmstm interval v1",
        "[meta]",
        f"speaker_id={sample.speaker_id}",
        f"W={sample.W}",
        f"T={sample.T}",
        f"J={sample.J}",
        f"d_text={sample.words[0].text_vec.shape[0]}",
        f"n_mels={sample.words[0].mel.shape[1]}",
        "[text]",
    ]
    lines += [_fmt_row(w.text_vec) for w in sample.words]
    for i, w in enumerate(sample.words):
        lines.append(f"[mel {i} {w.mel.shape[0]}]")
        lines += [_fmt_row(r) for r in w.mel]
    lines.append("[pose]")
    lines += [_fmt_row(r) for r in sample.pose]
    lines.append("[alignment]")
    lines += [f"{s},{e}" for s, e in sample.alignment]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_rows(lines: list[str], start: int, count: int, width: int, what: str) -> np.ndarray:
    if start + count > len(lines):
        raise MalformedInterval(f"{what}: truncated")
    try:
        arr = np.array([[float(v) for v in lines[start + i].split(",")] for i in range(count)],
                       dtype=np.float32)
    except ValueError as exc:
        raise MalformedInterval(f"{what}: {exc}") from exc
    if arr.shape != (count, width):
        raise MalformedInterval(f"{what}: expected {count}x{width}, got {arr.shape}")
    return arr


def read_interval_csv(path: str | os.PathLike) -> Sample:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    try:
        i = lines.index("[meta]") + 1
        meta: dict[str, str] = {}
        while i < len(lines) and not lines[i].startswith("["):
            key, _, val = lines[i].partition("=")
            meta[key] = val
            i += 1
        W, T, J = int(meta["W"]), int(meta["T"]), int(meta["J"])
        d_text, n_mels = int(meta["d_text"]), int(meta["n_mels"])
        speaker = meta["speaker_id"]
    except (ValueError, KeyError) as exc:
        raise MalformedInterval(f"{path}: bad [meta] section ({exc})") from exc

    if i >= len(lines) or lines[i] != "[text]":
        raise MalformedInterval(f"{path}: expected [text]")
    text = _read_rows(lines, i + 1, W, d_text, "text")
    i += 1 + W
    words = []
    for w in range(W):
        head = lines[i].strip("[]").split() if i < len(lines) else []
        if len(head) != 3 or head[0] != "mel" or int(head[1]) != w:
            raise MalformedInterval(f"{path}: expected [mel {w} <T_w>]")
        tw = int(head[2])
        words.append(WordFeature(text[w].copy(), _read_rows(lines, i + 1, tw, n_mels, f"mel {w}")))
        i += 1 + tw
    if i >= len(lines) or lines[i] != "[pose]":
        raise MalformedInterval(f"{path}: expected [pose]")
    pose = _read_rows(lines, i + 1, T, 2 * J, "pose")
    i += 1 + T
    if i >= len(lines) or lines[i] != "[alignment]":
        raise MalformedInterval(f"{path}: expected [alignment]")
    try:
        spans = [tuple(int(v) for v in lines[i + 1 + w].split(",")) for w in range(W)]
    except (ValueError, IndexError) as exc:
        raise MalformedInterval(f"{path}: bad alignment ({exc})") from exc
    if any(len(s) != 2 for s in spans):
        raise MalformedInterval(f"{path}: alignment rows must be s,e")
    return Sample(speaker, words, pose, [(s, e) for s, e in spans])


def write_interval_binary(sample: Sample, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, 0))
    name = sample.speaker_id.encode("utf-8")
    d_text = sample.words[0].text_vec.shape[0]
    n_mels = sample.words[0].mel.shape[1]
    buf.write(struct.pack("<I", len(name)) + name)
    buf.write(struct.pack("<5I", sample.W, sample.T, sample.J, d_text, n_mels))
    buf.write(np.stack([w.text_vec for w in sample.words]).astype("<f4").tobytes())
    for w in sample.words:
        buf.write(struct.pack("<I", w.mel.shape[0]))
        buf.write(np.ascontiguousarray(w.mel, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(sample.pose, dtype="<f4").tobytes())
    buf.write(np.asarray(sample.alignment, dtype="<i4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_interval_binary(path: str | os.PathLike) -> Sample:
    data = Path(path).read_bytes()
    view = memoryview(data)
    try:
        magic, version, _ = _HEADER.unpack_from(view, 0)
        if magic != BINARY_MAGIC:
            raise MalformedInterval(f"{path}: bad magic")
        if version != BINARY_VERSION:
            raise MalformedInterval(f"{path}: unsupported version {version}")
        off = _HEADER.size
        (n,) = struct.unpack_from("<I", view, off)
        off += 4
        speaker = bytes(view[off:off + n]).decode("utf-8")
        off += n
        W, T, J, d_text, n_mels = struct.unpack_from("<5I", view, off)
        off += 20

        def take(count: int, dtype: str) -> np.ndarray:
            nonlocal off
            nbytes = count * 4
            if off + nbytes > len(data):
                raise MalformedInterval(f"{path}: truncated")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
            off += nbytes
            return arr

        text = take(W * d_text, "<f4").reshape(W, d_text).astype(np.float32)
        words = []
        for w in range(W):
            (tw,) = struct.unpack_from("<I", view, off)
            off += 4
            words.append(WordFeature(text[w].copy(), take(tw * n_mels, "<f4").reshape(tw, n_mels).astype(np.float32)))
        pose = take(T * 2 * J, "<f4").reshape(T, 2 * J).astype(np.float32)
        spans = take(W * 2, "<i4").reshape(W, 2)
    except struct.error as exc:
        raise MalformedInterval(f"{path}: truncated ({exc})") from exc
    if off != len(data):
        raise MalformedInterval(f"{path}: {len(data) - off} trailing bytes")
    return Sample(speaker, words, pose, [(int(s), int(e)) for s, e in spans])


def write_interval(sample: Sample, path: str | os.PathLike) -> None:
    if str(path).endswith(".csv"):
        write_interval_csv(sample, path)
    else:
        write_interval_binary(sample, path)


def read_interval(path: str | os.PathLike) -> Sample:
    if str(path).endswith(".csv"):
        return read_interval_csv(path)
    return read_interval_binary(path)


def parse_interval(path: str | os.PathLike, manifest: DatasetManifest | None = None) -> Sample:
    """Read one interval file and validate it against the manifest dimensions."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"interval file not found: {path}")
    sample = read_interval(path)
    if manifest is None:
        return validate_sample(sample)
    validate_sample(sample, manifest.d_text, manifest.n_mels, manifest.J, manifest.T)
    sample.meta["fps"] = manifest.fps
    sample.meta["duration_s"] = sample.T / manifest.fps
    sample.meta["path"] = str(path)
    return sample


# ---------------------------------------------------------------- manifest

_HEADER_KEYS = {"d_text": int, "n_mels": int, "J": int, "T": int, "fps": float}


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    lines = [f"{k}={getattr(manifest, k)}" for k in _HEADER_KEYS]
    lines += [f"{spk}\t{split}\t{rel}" for spk, split, rel in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest file.

    The root directory is the manifest's parent unless ``ZSMSTM_DATA_ROOT`` is set.
    Header lines ``key=value`` precede tab-separated ``speaker<TAB>split<TAB>path``
    records; ``#`` starts a comment line.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest not found: {path}")
    root = Path(os.environ.get(DATA_ROOT_ENV) or path.parent)
    header: dict[str, float | int] = {}
    entries: list[tuple[str, str, str]] = []
    seen_paths: dict[str, int] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            key, sep, val = line.partition("=")
            if not sep or key not in _HEADER_KEYS:
                raise MalformedManifest(f"unrecognized header line {line!r}", lineno)
            if entries:
                raise MalformedManifest("header line after records", lineno)
            try:
                header[key] = _HEADER_KEYS[key](val)
            except ValueError as exc:
                raise MalformedManifest(f"bad value for {key}: {val!r}", lineno) from exc
            if header[key] <= 0:
                raise MalformedManifest(f"{key} must be positive", lineno)
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise MalformedManifest("record must be speaker<TAB>split<TAB>path", lineno)
        spk, split, rel = parts
        if split not in SPLITS:
            raise MalformedManifest(f"unknown split {split!r}", lineno)
        if rel in seen_paths:
            raise MalformedManifest(f"interval {rel} already listed on line {seen_paths[rel]}", lineno)
        seen_paths[rel] = lineno
        entries.append((spk, split, rel))
    manifest = DatasetManifest(root=root, entries=entries, **header)
    if check_files:
        for _, _, rel in entries:
            if not (root / rel).exists():
                raise MissingFile(f"interval file not found: {root / rel}")
    return manifest


# ---------------------------------------------------------------- normalization

def _stream_arrays(samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    return {
        "pose": np.concatenate([s.pose for s in samples]).astype(np.float64),
        "mel": np.concatenate([w.mel for s in samples for w in s.words]).astype(np.float64),
        "text": np.stack([w.text_vec for s in samples for w in s.words]).astype(np.float64),
    }


def _fit_stream(x: np.ndarray, tol: float = 1e-12) -> StreamStats:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    degenerate = std <= tol * np.maximum(1.0, np.abs(mean))
    std = np.where(degenerate, 1.0, std)
    return StreamStats(mean, std, degenerate)


def fit_normalization(samples: Sequence[Sample]) -> NormalizationStats:
    """Per-feature mean/std over a (training) sample set; population std."""
    if not samples:
        raise EmptyDataset("cannot fit normalization on zero samples")
    arrays = _stream_arrays(samples)
    return NormalizationStats(**{k: _fit_stream(v) for k, v in arrays.items()})


def normalize_array(x: np.ndarray, stats: StreamStats) -> np.ndarray:
    if x.shape[-1] != stats.mean.shape[0]:
        raise DimensionMismatch(f"feature dim {x.shape[-1]} vs stats {stats.mean.shape[0]}")
    out = (x - stats.mean) * 0.5 / stats.std
    return np.where(stats.degenerate, 0.0, out)


def denormalize_array(x: np.ndarray, stats: StreamStats) -> np.ndarray:
    if x.shape[-1] != stats.mean.shape[0]:
        raise DimensionMismatch(f"feature dim {x.shape[-1]} vs stats {stats.mean.shape[0]}")
    return x * stats.std / 0.5 + stats.mean


def _map_sample(sample: Sample, stats: NormalizationStats, fn, dtype) -> Sample:
    words = [
        WordFeature(fn(w.text_vec, stats.text).astype(dtype), fn(w.mel, stats.mel).astype(dtype))
        for w in sample.words
    ]
    return replace(sample, words=words, pose=fn(sample.pose, stats.pose).astype(dtype),
                   meta=dict(sample.meta))


def normalize(sample: Sample, stats: NormalizationStats, dtype=np.float32) -> Sample:
    """x' = (x - mean) * 0.5 / std per feature; degenerate features map to 0."""
    return _map_sample(sample, stats, normalize_array, dtype)


def denormalize(sample: Sample, stats: NormalizationStats, dtype=np.float32) -> Sample:
    return _map_sample(sample, stats, denormalize_array, dtype)


def denormalize_pose(pose: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return denormalize_array(np.asarray(pose, dtype=np.float64), stats.pose)


# ---------------------------------------------------------------- splits & batches

@dataclass
class SpeakerSplit:
    train: list[tuple[str, Path]]
    valid: list[tuple[str, Path]]
    seen_test: list[tuple[str, Path]]
    unseen_test: list[tuple[str, Path]]

    def speakers(self, part: str) -> set[str]:
        return {spk for spk, _ in getattr(self, part)}


def split_speakers(manifest: DatasetManifest, seen: Sequence[str] = PATS_SEEN_SPEAKERS,
                   unseen: Sequence[str] = PATS_UNSEEN_SPEAKERS) -> SpeakerSplit:
    """Seen speakers contribute train/valid/test; unseen speakers only their test intervals."""
    overlap = set(seen) & set(unseen)
    if overlap:
        raise OverlappingSplits(f"speakers both seen and unseen: {sorted(overlap)}")
    known = set(manifest.speakers)
    missing = [s for s in (*seen, *unseen) if s not in known]
    if missing:
        raise UnknownSpeaker(f"speakers not in manifest: {missing}")
    seen_set, unseen_set = set(seen), set(unseen)
    out = SpeakerSplit([], [], [], [])
    for spk, split, rel in manifest.entries:
        item = (spk, manifest.root / rel)
        if spk in seen_set:
            {"train": out.train, "valid": out.valid, "test": out.seen_test}[split].append(item)
        elif spk in unseen_set and split == "test":
            out.unseen_test.append(item)
    return out


def make_batches(samples: Sequence, batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0) -> Iterator[list]:
    """One epoch of shuffled batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(samples) == 0:
        raise EmptyDataset("no samples to batch")
    order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]
