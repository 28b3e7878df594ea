"""Binary checkpoint format (little-endian).

::

    b"DAEG" | u32 version | u32 stage | u64 epoch
    u64 n_tensors, then n_tensors records
    u64 n_adam,    then n_adam records ("adam.m.<param>", "adam.v.<param>", "adam.t.<net>")
    u32 config length | UTF-8 JSON config snapshot
    u64 RNG state

    record := u32 name length | UTF-8 name | u8 dtype (0 f32, 1 f64) | u8 ndim
              | u64 dims[ndim] | raw payload
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DAEG"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: int
    epoch: int
    tensors: dict
    adam: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    rng_state: int = 0
    version: int = VERSION


def _pack_record(name, arr):
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def save_checkpoint(ckpt, path):
    """Write atomically: a temp file is renamed over ``path`` once complete."""
    parts = [MAGIC, struct.pack("<IIQ", VERSION, ckpt.stage, ckpt.epoch)]
    parts.append(struct.pack("<Q", len(ckpt.tensors)))
    parts += [_pack_record(k, v) for k, v in ckpt.tensors.items()]
    parts.append(struct.pack("<Q", len(ckpt.adam)))
    parts += [_pack_record(k, v) for k, v in ckpt.adam.items()]
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    parts.append(struct.pack("<Q", ckpt.rng_state & 0xFFFFFFFFFFFFFFFF))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def record(self, i, section):
        label = f"{section} record #{i}"
        (nlen,) = self.unpack("<I", label + " name length")
        name = self.take(nlen, label + " name").decode("utf-8")
        label = f"{section} record #{i} ({name!r})"
        tag, ndim = self.unpack("<BB", label + " header")
        if tag not in _DTYPES:
            raise CheckpointError(f"{self.path}: {label} has unknown dtype tag {tag}")
        dims = self.unpack(f"<{ndim}Q", label + " dims")
        dtype = _DTYPES[tag]
        count = int(np.prod(dims)) if ndim else 1
        payload = self.take(count * dtype.itemsize, label + " payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        return name, arr


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads "
                              f"version {VERSION}")
    stage, epoch = r.unpack("<IQ", "stage/epoch")
    (n,) = r.unpack("<Q", "tensor count")
    tensors = dict(r.record(i, "tensor") for i in range(n))
    if len(tensors) != n:
        raise CheckpointError(f"{path}: duplicate tensor names")
    (na,) = r.unpack("<Q", "adam count")
    adam = dict(r.record(i, "adam") for i in range(na))
    (clen,) = r.unpack("<I", "config length")
    config = json.loads(r.take(clen, "config snapshot").decode("utf-8"))
    (rng_state,) = r.unpack("<Q", "rng state")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after RNG state")
    return Checkpoint(stage, epoch, tensors, adam, config, rng_state, version)
