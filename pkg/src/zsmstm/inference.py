"""Zero-shot style extraction and style-conditioned gesture generation.

Nothing here updates parameters: models are put in eval mode and every
forward runs under ``torch.no_grad``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import read_container, write_container
from .data import DatasetManifest, NormalizationStats, Sample, denormalize_pose, normalize
from .errors import DataError, DimensionMismatch, EmptyInput, UnknownSpeaker
from .model import ZSMSTM, collate

log = logging.getLogger(__name__)


def _prepare(samples: Sequence[Sample], stats: NormalizationStats | None) -> list[Sample]:
    return [normalize(s, stats) if stats is not None else s for s in samples]


@torch.no_grad()
def extract_style(model: ZSMSTM, samples: Sequence[Sample], stats: NormalizationStats | None = None,
                  batch_size: int = 24) -> np.ndarray:
    """Mean style embedding over one speaker's intervals (raw units if ``stats`` given)."""
    if not samples:
        raise EmptyInput("extract_style needs at least one sample")
    model.eval()
    samples = _prepare(samples, stats)
    dtype = next(model.parameters()).dtype
    total = None
    for i in range(0, len(samples), batch_size):
        h = model.encode_style(collate(samples[i:i + batch_size], dtype=dtype)).sum(0)
        total = h if total is None else total + h
    return (total / len(samples)).cpu().numpy()


@torch.no_grad()
def transfer(model: ZSMSTM, source: Sample | Sequence[Sample], target_style: np.ndarray,
             stats: NormalizationStats | None = None, batch_size: int = 24) -> np.ndarray | list[np.ndarray]:
    """Generate poses for the source content conditioned on ``target_style``.

    Decoding is autoregressive. With ``stats`` the source is normalized first
    and the output is returned in data units.
    """
    single = isinstance(source, Sample)
    sources = _prepare([source] if single else list(source), stats)
    style = torch.as_tensor(np.asarray(target_style))
    if style.shape != (model.cfg.d_style,):
        raise DimensionMismatch(f"style has shape {tuple(style.shape)}, model expects ({model.cfg.d_style},)")
    model.eval()
    dtype = next(model.parameters()).dtype
    outputs = []
    for i in range(0, len(sources), batch_size):
        batch = collate(sources[i:i + batch_size], with_pose=False, dtype=dtype)
        h_content = model.encode_content(batch)
        h_style = style.to(dtype).unsqueeze(0).expand(batch.size, -1)
        pred = model.generate(h_content, h_style, batch.frame_word).cpu().numpy().astype(np.float64)
        outputs.extend(denormalize_pose(p, stats) if stats is not None else p for p in pred)
    return outputs[0] if single else outputs


@dataclass
class StyleBank:
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.embeddings)

    def __getitem__(self, speaker: str) -> np.ndarray:
        if speaker not in self.embeddings:
            raise UnknownSpeaker(f"speaker {speaker!r} not in style bank")
        return self.embeddings[speaker]

    def add(self, speaker: str, embedding: np.ndarray, count: int) -> None:
        if count < 1:
            raise ValueError("count must be >= 1")
        if self.embeddings:
            d = next(iter(self.embeddings.values())).shape
            if embedding.shape != d:
                raise DimensionMismatch(f"embedding shape {embedding.shape} vs bank {d}")
        self.embeddings[speaker] = np.asarray(embedding, dtype=np.float32)
        self.counts[speaker] = int(count)

    def save(self, path: str | Path) -> None:
        """``.csv`` writes the text form; anything else the binary container."""
        path = Path(path)
        if path.suffix == ".csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["speaker_id", "count", "embedding"])
                for spk, vec in self.embeddings.items():
                    w.writerow([spk, self.counts[spk], " ".join(repr(float(v)) for v in vec)])
            return
        header = {"kind": "style_bank", "speakers": list(self.embeddings), "counts": self.counts}
        write_container(path, header, {f"style.{k}": v for k, v in self.embeddings.items()})

    @classmethod
    def load(cls, path: str | Path) -> "StyleBank":
        path = Path(path)
        bank = cls()
        if path.suffix == ".csv":
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    vec = np.array([float(v) for v in row["embedding"].split()], dtype=np.float32)
                    bank.add(row["speaker_id"], vec, int(row["count"]))
            return bank
        header, tensors = read_container(path)
        if header.get("kind") != "style_bank":
            raise DataError(f"{path}: not a style bank")
        for spk in header["speakers"]:
            bank.add(spk, tensors[f"style.{spk}"], header["counts"][spk])
        return bank


def build_style_bank(model: ZSMSTM, manifest: DatasetManifest, speakers: Sequence[str],
                     stats: NormalizationStats | None = None, split: str | None = "test") -> StyleBank:
    """Average style embedding per speaker over its intervals in ``split`` (all splits if None)."""
    known = set(manifest.speakers)
    missing = [s for s in speakers if s not in known]
    if missing:
        raise UnknownSpeaker(f"speakers not in manifest: {missing}")
    bank = StyleBank()
    for spk in speakers:
        samples = manifest.load(spk, split)
        if not samples:
            raise EmptyInput(f"speaker {spk} has no {split} intervals")
        bank.add(spk, extract_style(model, samples, stats), len(samples))
        log.info("style for %s averaged over %d intervals", spk, len(samples))
    return bank
