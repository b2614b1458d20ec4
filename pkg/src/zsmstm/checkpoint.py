"""Versioned binary container for parameters, normalization stats and optimizer state.

Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header, then
the raw little-endian tensor payload. The header indexes every tensor by name
with dtype, shape, offset and byte count. Parameters are stored as float32,
normalization statistics as float64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .data import NormalizationStats, StreamStats
from .errors import DataError

MAGIC = b"ZSMSTMCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def write_container(path: str | Path, header: dict, tensors: Mapping[str, np.ndarray]) -> None:
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "<f8" if arr.dtype == np.float64 else "<i8" if arr.dtype.kind in "iu" else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": index}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs))


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise DataError(f"{path}: truncated container")
    magic, version, n = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint/style-bank container")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    header = json.loads(data[_PREFIX.size:_PREFIX.size + n].decode("utf-8"))
    base = _PREFIX.size + n
    tensors = {}
    for item in header.pop("tensors"):
        start = base + item["offset"]
        arr = np.frombuffer(data[start:start + item["nbytes"]], dtype=item["dtype"])
        tensors[item["name"]] = arr.reshape(item["shape"]).copy()
    return header, tensors


def stats_to_tensors(stats: NormalizationStats) -> dict[str, np.ndarray]:
    out = {}
    for stream, st in stats.streams().items():
        out[f"norm.{stream}.mean"] = st.mean.astype(np.float64)
        out[f"norm.{stream}.std"] = st.std.astype(np.float64)
        out[f"norm.{stream}.degenerate"] = st.degenerate.astype(np.int64)
    return out


def stats_from_tensors(tensors: Mapping[str, np.ndarray]) -> NormalizationStats | None:
    if "norm.pose.mean" not in tensors:
        return None
    return NormalizationStats(**{
        s: StreamStats(tensors[f"norm.{s}.mean"], tensors[f"norm.{s}.std"],
                       tensors[f"norm.{s}.degenerate"].astype(bool))
        for s in ("pose", "mel", "text")
    })


def optimizer_to_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict[str, np.ndarray]]:
    sd = opt.state_dict()
    tensors, steps = {}, {}
    for idx, st in sd["state"].items():
        steps[str(idx)] = float(st["step"])
        for key in ("exp_avg", "exp_avg_sq"):
            tensors[f"{prefix}.{idx}.{key}"] = st[key].detach().cpu().numpy()
    return {"param_groups": sd["param_groups"], "steps": steps}, tensors


def optimizer_from_tensors(prefix: str, opt: torch.optim.Optimizer, meta: dict,
                           tensors: Mapping[str, np.ndarray]) -> None:
    dtype = opt.param_groups[0]["params"][0].dtype
    state = {
        int(idx): {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": torch.as_tensor(tensors[f"{prefix}.{idx}.exp_avg"]).to(dtype),
            "exp_avg_sq": torch.as_tensor(tensors[f"{prefix}.{idx}.exp_avg_sq"]).to(dtype),
        }
        for idx, step in meta["steps"].items()
    }
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    stats: NormalizationStats | None = None
    meta: dict = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self):
        from .model import ModelConfig, ZSMSTM

        model = ZSMSTM(ModelConfig.from_dict(self.config))
        model.load_state_dict({k: torch.as_tensor(v) for k, v in self.params.items()})
        model.eval()
        return model


def model_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"param.{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def save_checkpoint(path: str | Path, model, stats: NormalizationStats | None = None,
                    meta: dict | None = None, optimizers: Mapping[str, torch.optim.Optimizer] | None = None) -> None:
    tensors = model_tensors(model)
    if stats is not None:
        tensors.update(stats_to_tensors(stats))
    opt_meta = {}
    for prefix, opt in (optimizers or {}).items():
        opt_meta[prefix], t = optimizer_to_tensors(f"optim.{prefix}", opt)
        tensors.update(t)
    header = {"kind": "checkpoint", "model_config": model.cfg.to_dict(), "meta": meta or {}, "optimizers": opt_meta}
    write_container(path, header, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise DataError(f"{path}: not a model checkpoint")
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    optim = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    meta = dict(header["meta"])
    meta["optimizers"] = header.get("optimizers", {})
    return Checkpoint(header["model_config"], params, stats_from_tensors(tensors), meta, optim)


def params_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
