"""Binary tensor snapshots.

Layout (little-endian): magic ``PSTK``, version u32, rank u32,
extents u64[rank], dtype tag u8 (0 = f64, 1 = f32), raw values.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

MAGIC = b"PSTK"
VERSION = 1
_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TAGS:
        raise TypeError(f"cannot snapshot dtype {arr.dtype}")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<B", _TAGS[dt]) + np.ascontiguousarray(arr, dtype=dt).tobytes()


def write_tensor(f: BinaryIO, t: Tensor | np.ndarray) -> None:
    f.write(tensor_to_bytes(t))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor snapshot: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> Tensor:
    if _read_exact(f, 4) != MAGIC:
        raise ValueError("not a tensor snapshot (bad magic)")
    version, rank = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise ValueError(f"unsupported tensor snapshot version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    (tag,) = struct.unpack("<B", _read_exact(f, 1))
    if tag not in _DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt).reshape(shape)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True), dtype=arr.dtype.newbyteorder("="))
