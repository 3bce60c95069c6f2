"""Versioned binary checkpoints: magic, JSON header, raw little-endian float32 records.

Layout::

    b"FFKDCKPT"  uint32 version  uint64 header_len  header (UTF-8 JSON)  data

The header holds ``config`` (model config echo), ``meta`` (training
metadata) and ``records``: a list of ``{name, shape, offset, nbytes}`` whose
offsets index into the data section.  The JSON is written with sorted keys
and no extra whitespace, so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FFKDCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict  # name -> float32 ndarray, insertion-ordered
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def to_bytes(ckpt: Checkpoint) -> bytes:
    records = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ckpt.config, "meta": ckpt.meta, "records": records},
                        sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, ckpt.version, len(header)) + header + b"".join(chunks)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"{source}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} "
                              f"(expected {VERSION})")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt header ({e})") from e
    data = memoryview(buf)[start:]
    tensors = {}
    for rec in header["records"]:
        name = rec["name"]
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if count * 4 != rec["nbytes"]:
            raise CheckpointError(f"{source}: record {name!r} shape {shape} does not match "
                                  f"its {rec['nbytes']} bytes")
        end = rec["offset"] + rec["nbytes"]
        if rec["offset"] < 0 or end > len(data):
            raise CheckpointError(f"{source}: record {name!r} extends past end of file")
        arr = np.frombuffer(data[rec["offset"]:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return Checkpoint(header["config"], tensors, header.get("meta", {}), version)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), str(path))


def from_model(model, meta: dict | None = None) -> Checkpoint:
    config = json.loads(json.dumps(model.cfg.to_dict()))
    return Checkpoint(config, dict(model.state_dict()), dict(meta or {}))


def load_into(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model`` after checking config and shapes."""
    want = json.loads(json.dumps(model.cfg.to_dict()))
    if ckpt.config != want:
        diff = sorted(k for k in set(want) | set(ckpt.config) if want.get(k) != ckpt.config.get(k))
        raise CheckpointError(f"checkpoint config differs from model config in {diff}")
    state = model.state_dict()
    for name, arr in ckpt.tensors.items():
        if name not in state:
            raise CheckpointError(f"unexpected record {name!r}")
        if state[name].shape != arr.shape:
            raise CheckpointError(f"record {name!r} has shape {arr.shape}, model expects "
                                  f"{state[name].shape}")
    missing = set(state) - set(ckpt.tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks records {sorted(missing)[:5]}")
    model.load_state_dict(ckpt.tensors)


def build_model(ckpt: Checkpoint, seed: int = 0):
    """Instantiate a Detector from the config echo and load the weights."""
    from .detect import Detector, ModelConfig

    model = Detector(ModelConfig.from_dict(ckpt.config), seed=seed)
    load_into(model, ckpt)
    return model
