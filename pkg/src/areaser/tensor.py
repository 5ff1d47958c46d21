"""Array helpers: validation, matmul and the ``ATNT`` binary tensor format.

Tensors are plain :class:`numpy.ndarray` objects.  The on-disk format is::

    b"ATNT" | u8 dtype code (0=f32, 1=f64) | u8 rank | rank x u32 extents (LE)
    | raw little-endian scalars, row-major
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import BinaryIO, Dict, Union

import numpy as np

from .errors import DimensionError, InputError, NumericalError

MAGIC = b"ATNT"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class GradBundle:
    """Gradient of a scalar loss w.r.t. a layer's input and its parameters."""

    input_grad: np.ndarray
    param_grads: Dict[str, np.ndarray] = field(default_factory=dict)


def resolve_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise DimensionError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def write_tensor(fh: BinaryIO, x: np.ndarray) -> None:
    x = np.asarray(x)
    dt = x.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise DimensionError(f"cannot serialise dtype {x.dtype}")
    if any(s <= 0 for s in x.shape):
        raise DimensionError(f"extents must be positive, got {x.shape}")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_CODES[dt], x.ndim))
    fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
    fh.write(np.ascontiguousarray(x, dtype=dt).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(6)
    if len(head) != 6 or head[:4] != MAGIC:
        raise InputError("not an ATNT tensor stream")
    code, rank = struct.unpack("<BB", head[4:])
    if code not in _CODE_DTYPES:
        raise InputError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise InputError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path: Union[str, PathLike], x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path: Union[str, PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()
