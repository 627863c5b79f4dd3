"""Minimal binary tensor container: header (magic, dtype code, rank, dims) then row-major data."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"ITNS"
_CODES = {1: np.float16, 2: np.float32, 3: np.float64}
_BY_DTYPE = {np.dtype(v): k for k, v in _CODES.items()}
_HEADER = struct.Struct("<4sII")


class TensorFormatError(ValueError):
    pass


def write_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    code = _BY_DTYPE.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, code, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC or code not in _CODES:
        raise TensorFormatError(f"{path}: not a tensor file")
    off = _HEADER.size + 8 * ndim
    if len(raw) < off:
        raise TensorFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, _HEADER.size)
    dtype = np.dtype(_CODES[code]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - off != count * dtype.itemsize:
        raise TensorFormatError(f"{path}: payload size does not match dims {shape}")
    return np.frombuffer(raw, dtype=dtype, offset=off, count=count).reshape(shape).astype(_CODES[code])
