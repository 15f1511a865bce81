"""Binary checkpoint container.

Layout: length-prefixed entries of (utf-8 name, u32 rank, u64 extents,
little-endian f64 payload), a zero name-length terminator, then a trailing
JSON manifest carrying the config hash, frozen set, step counter, tag, and
metric snapshot.  Writes are atomic (temp file + rename).  Optimizer moments
ride along as "opt/..." entries and exist only for trainable parameters.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np


class CheckpointError(ValueError):
    """Container is malformed; message names the failing entry."""


class ConfigMismatch(ValueError):
    """Checkpoint was produced under a different config hash."""


def config_hash(config) -> str:
    return hashlib.sha256(repr(config).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    entries: dict = field(default_factory=dict)  # name -> float64 ndarray
    frozen: set = field(default_factory=set)
    step: int = 0
    config_hash: str = ""
    tag: str = ""
    metrics: dict = field(default_factory=dict)

    def param_entries(self) -> dict:
        return {k: v for k, v in self.entries.items() if not k.startswith("opt/")}

    def opt_entries(self) -> dict:
        return {k: v for k, v in self.entries.items() if k.startswith("opt/")}

    def validate(self):
        opt_targets = {k.split("/", 3)[-1] for k in self.opt_entries()
                       if k.count("/") >= 3}
        overlap = opt_targets & self.frozen
        if overlap:
            raise CheckpointError(
                f"optimizer state present for frozen parameters: {sorted(overlap)[:3]}")


def snapshot(params: dict, frozen: set, step: int, cfg_hash: str, tag: str,
             metrics: dict | None = None, opt_state: dict | None = None) -> Checkpoint:
    """Deep-copied checkpoint of a live parameter registry."""
    entries = {name: t.data.copy() for name, t in params.items()}
    if opt_state:
        for k, v in opt_state.items():
            entries[f"opt/{k}"] = np.asarray(v, dtype=np.float64).copy()
    ckpt = Checkpoint(entries=entries, frozen=set(frozen), step=step,
                      config_hash=cfg_hash, tag=tag, metrics=dict(metrics or {}))
    ckpt.validate()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str):
    ckpt.validate()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        for name, arr in ckpt.entries.items():
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<Q", extent))
            f.write(arr.tobytes())
        f.write(struct.pack("<I", 0))
        manifest = json.dumps({
            "config_hash": ckpt.config_hash,
            "frozen": sorted(ckpt.frozen),
            "step": ckpt.step,
            "tag": ckpt.tag,
            "metrics": ckpt.metrics,
        }).encode()
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0
    entries = {}

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated container while reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    while True:
        (name_len,) = struct.unpack("<I", take(4, "entry name length"))
        if name_len == 0:
            break
        name = take(name_len, "entry name").decode()
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        shape = tuple(struct.unpack("<Q", take(8, f"extent of {name!r}"))[0]
                      for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = take(count * 8, f"payload of {name!r}")
        entries[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    (mlen,) = struct.unpack("<I", take(4, "manifest length"))
    manifest = json.loads(take(mlen, "manifest").decode())
    return Checkpoint(entries=entries, frozen=set(manifest["frozen"]),
                      step=int(manifest["step"]), config_hash=manifest["config_hash"],
                      tag=manifest["tag"], metrics=manifest["metrics"])


def load_into(model, ckpt: Checkpoint, force: bool = False):
    """Copy checkpoint entries into a model's registry, hash-checked."""
    expected = config_hash((model.config, model.seed))
    if ckpt.config_hash and ckpt.config_hash != expected:
        if not force:
            raise ConfigMismatch(
                f"checkpoint config hash {ckpt.config_hash} != model {expected}; "
                "pass force=True to load anyway")
        warnings.warn(f"loading checkpoint with mismatched config hash "
                      f"{ckpt.config_hash} (model {expected})")
    params = model.params()
    stored = ckpt.param_entries()
    missing = set(params) - set(stored)
    if missing:
        raise CheckpointError(f"missing entry {sorted(missing)[0]!r} in container")
    for name, tensor in params.items():
        arr = stored[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"entry {name!r} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data[...] = arr
