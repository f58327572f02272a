"""Stage checkpoints: a JSON descriptor plus one matrix file per tensor.

Tensors whose dtype the matrix format lacks (float64, int64) are stored as
their raw bytes viewed as uint32 words, so every round trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import read_matrix, write_matrix
from .ndcore import Mlp

DESCRIPTOR = "descriptor.json"


class CheckpointError(RuntimeError):
    """Base for checkpoint lifecycle failures."""


class MissingCheckpointError(CheckpointError):
    def __init__(self, stage: str, path):
        super().__init__(f"missing prerequisite: run stage '{stage}' first (no checkpoint at {path})")
        self.stage = stage


class StaleCheckpointError(CheckpointError):
    def __init__(self, stage: str, found: str, expected: str):
        super().__init__(
            f"stale checkpoint for stage '{stage}': config hash {found} != expected {expected}; rerun '{stage}'"
        )
        self.stage = stage


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    master_seed: int
    tensors: dict = field(default_factory=dict)  # name -> ndarray
    meta: dict = field(default_factory=dict)  # JSON-serializable extras


def _to_words(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype in (np.dtype("<f4"), np.dtype("<u4")) and a.ndim == 2:
        return a
    if a.dtype.itemsize % 4 or a.dtype.byteorder == ">":
        raise CheckpointError(f"cannot store dtype {a.dtype}")
    return a.reshape(-1).view("<u4").reshape(1, -1)


def save_checkpoint(directory, ckpt: Checkpoint) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(ckpt.tensors):
        a = np.asarray(ckpt.tensors[name])
        fname = f"{name}.zsmx"
        write_matrix(d / fname, _to_words(a))
        entries[name] = {"file": fname, "dtype": a.dtype.str, "shape": list(a.shape)}
    desc = {
        "stage": ckpt.stage,
        "config_hash": ckpt.config_hash,
        "master_seed": int(ckpt.master_seed),
        "tensors": entries,
        "meta": ckpt.meta,
    }
    (d / DESCRIPTOR).write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory, stage: str | None = None, expected_hash: str | None = None) -> Checkpoint:
    d = Path(directory)
    path = d / DESCRIPTOR
    if not path.exists():
        raise MissingCheckpointError(stage or d.name, d)
    desc = json.loads(path.read_text())
    if stage is not None and desc["stage"] != stage:
        raise CheckpointError(f"{d} holds stage '{desc['stage']}', expected '{stage}'")
    if expected_hash is not None and desc["config_hash"] != expected_hash:
        raise StaleCheckpointError(desc["stage"], desc["config_hash"], expected_hash)
    tensors = {}
    for name, e in desc["tensors"].items():
        raw = read_matrix(d / e["file"])
        dt = np.dtype(e["dtype"])
        tensors[name] = raw if raw.dtype == dt and list(raw.shape) == e["shape"] else (
            np.ascontiguousarray(raw).view(dt).reshape(e["shape"])
        )
    return Checkpoint(desc["stage"], desc["config_hash"], desc["master_seed"], tensors, desc.get("meta", {}))


def mlp_tensors(prefix: str, net: Mlp) -> tuple[dict, dict]:
    """Split an Mlp into tensors and the metadata needed to rebuild it."""
    t = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        t[f"{prefix}.w{i}"] = w
        t[f"{prefix}.b{i}"] = b
    return t, {"layers": len(net.weights), "activations": list(net.activations)}


def mlp_from_tensors(prefix: str, tensors: dict, meta: dict) -> Mlp:
    n = meta["layers"]
    return Mlp(
        [np.array(tensors[f"{prefix}.w{i}"]) for i in range(n)],
        [np.array(tensors[f"{prefix}.b{i}"]) for i in range(n)],
        list(meta["activations"]),
    )
