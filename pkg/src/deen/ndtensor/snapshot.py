"""Binary tensor snapshot format.

Byte layout (all integers little-endian)::

    offset  size     field
    0       4        magic  b"NDTS"
    4       1        version (1)
    5       1        dtype code: 1 = float32, 2 = float64
    6       2        ndim (uint16)
    8       8*ndim   shape, one uint64 per axis
    ...     itemsize*prod(shape)   values, row-major, little-endian

A zero-dimensional array stores ndim = 0 and a single value.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import DataError
from .tensor import Tensor

MAGIC = b"NDTS"
VERSION = 1
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def to_bytes(x: Union[np.ndarray, Tensor]) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBH", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise DataError("not a tensor snapshot (bad magic)")
    version, code, ndim = struct.unpack_from("<BBH", buf, 4)
    if version != VERSION or code not in _DTYPES:
        raise DataError(f"unsupported snapshot version {version} / dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    start = 8 + 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != start + count * dtype.itemsize:
        raise DataError("snapshot payload length does not match its shape")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


def save(path: Union[str, Path], x: Union[np.ndarray, Tensor]) -> None:
    Path(path).write_bytes(to_bytes(x))


def load(path: Union[str, Path]) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
