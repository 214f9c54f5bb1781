"""Named-tensor checkpoint I/O.

Little-endian binary layout:

    magic     4 bytes  b"HENT"
    version   u32      currently 1
    count     u32      number of named tensors
    per tensor:
        name_len  u32
        name      name_len bytes, UTF-8
        rank      u32
        extents   rank * u64
        payload   product(extents) * float64

Writers emit tensors in the order given; readers preserve that order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"HENT"
VERSION = 1


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path: str | Path, named: "OrderedDict[str, np.ndarray] | dict") -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name, value in named.items():
            arr = np.ascontiguousarray(getattr(value, "data", value), dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_tensors(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, count = struct.unpack("<II", header)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
            extents = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, path))
            n = int(np.prod(extents)) if rank else 1
            payload = _read_exact(fh, 8 * n, path)
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(extents)
            out[name] = arr
    return out


def _read_exact(fh, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated tensor record")
    return buf
