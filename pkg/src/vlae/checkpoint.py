"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"VLAE"  u32 version
    u32 n_records
    n_records x { u32 name_len, name (utf-8), u32 ndim, u64 dims[ndim],
                  float64 data (little-endian, row-major) }
    u32 config_len, config text (key=value lines)
    u32 rng_len, rng state (JSON)

Loading rejects any version other than ``VERSION``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VLAE"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config_text: str = ""
    rng_state: dict | None = None


def _u32(buf, value: int) -> None:
    buf.write(struct.pack("<I", value))


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    _u32(buf, len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        _u32(buf, len(raw_name))
        buf.write(raw_name)
        _u32(buf, arr.ndim)
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for text in (ckpt.config_text, json.dumps(ckpt.rng_state, sort_keys=True)):
        raw = text.encode("utf-8")
        _u32(buf, len(raw))
        buf.write(raw)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a VLAE checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(dims)
    config_text = r.take(r.u32()).decode("utf-8")
    rng_state = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(tensors, config_text, rng_state)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__uint64__": [int(v) for v in obj.ravel()]}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__uint64__"}:
            return np.array(obj["__uint64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    state = _from_jsonable(state)
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
