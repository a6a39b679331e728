"""Flat binary checkpoints of named float64 tensors.

Layout (all integers little-endian): u32 tensor count, then per tensor
u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims, float64 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    off = 0

    def take(fmt: str):
        nonlocal off
        vals = struct.unpack_from(fmt, buf, off)
        off += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (n,) = take("<I")
        name = buf[off:off + n].decode("utf-8")
        off += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes after {count} tensors")
    return out
