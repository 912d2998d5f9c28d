"""Flat binary tensor blobs: little-endian header (rank, extents as u64)
followed by raw float payload.

The interchange format (flow files, predictions, golden tensors) is always
float32.  Checkpoints may carry float64 payloads; the element width is then
recorded in the checkpoint manifest and passed to :func:`load_blob` — the
header itself stays identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAX_RANK = 16


def save_blob(path, array: np.ndarray, dtype: str = "float32") -> None:
    arr = np.asarray(array).astype(np.dtype(dtype).newbyteorder("<"), copy=False)
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_blob(path, dtype: str = "float32") -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated blob header")
    (rank,) = struct.unpack_from("<Q", raw, 0)
    if rank > _MAX_RANK:
        raise ValueError(f"{path}: implausible rank {rank}")
    if len(raw) < 8 + 8 * rank:
        raise ValueError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    dt = np.dtype(dtype).newbyteorder("<")
    payload = raw[8 + 8 * rank :]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(payload) != count * dt.itemsize:
        raise ValueError(f"{path}: payload size {len(payload)} != expected {count * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).reshape(tuple(shape)).astype(np.dtype(dtype))
