"""``PDTR`` parameter container.

Layout (little-endian): magic ``PDTR``, u32 version, u32 parameter count, then
per parameter: u32 name length, UTF-8 name, u32 rank, rank x u32 extents and
the float32 values in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDTR"
VERSION = 1


class CheckpointError(RuntimeError):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class VersionError(CheckpointError):
    code = "version"


class TruncatedError(CheckpointError):
    code = "truncated"


class UnknownParameterError(CheckpointError):
    code = "unknown_parameter"


class ShapeMismatchError(CheckpointError):
    code = "shape_mismatch"


def encode_parameters(named: list) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, value in named:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_parameters(blob: bytes) -> list:
    """[(name, float32 array)] in file order."""
    if blob[:4] != MAGIC:
        raise BadMagicError("not a PDTR checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedError(f"file truncated at offset {len(blob)} (needed {pos + n})")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        out.append((name, values))
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last parameter")
    return out


def save_checkpoint(model, path) -> int:
    """Write every named parameter; returns the file size in bytes."""
    blob = encode_parameters([(n, p.data) for n, p in model.named_parameters()])
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(model, path) -> None:
    entries = decode_parameters(Path(path).read_bytes())
    params = dict(model.named_parameters())
    seen = set()
    for name, values in entries:
        if name not in params:
            raise UnknownParameterError(f"checkpoint parameter {name!r} not in model")
        p = params[name]
        if tuple(values.shape) != tuple(p.data.shape):
            raise ShapeMismatchError(f"{name}: checkpoint {values.shape} vs model {p.data.shape}")
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise UnknownParameterError(f"checkpoint lacks parameters: {missing[:3]}")
    for name, values in entries:
        p = params[name]
        p.data = values.astype(p.data.dtype)
