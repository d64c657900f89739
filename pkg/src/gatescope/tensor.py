"""Dense F64 matrices and the exact primitives the rest of the package uses.

A "matrix" here is a 2-D, C-contiguous ``numpy.float64`` array. Storage dtypes
(F32/F16/BF16) only exist at the byte level; everything is widened to F64
before any arithmetic.

Reductions use numpy's pairwise summation over the row-major flattened array,
which is fixed for a given shape, so norms are bit-reproducible across runs.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import FormatError, ShapeError


class Dtype(enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def byte_size(self) -> int:
        return _BYTE_SIZE[self]

    @classmethod
    def parse(cls, text: str) -> "Dtype":
        try:
            return cls(text)
        except ValueError:
            raise FormatError(f"unknown dtype {text!r}") from None


_BYTE_SIZE = {Dtype.F64: 8, Dtype.F32: 4, Dtype.F16: 2, Dtype.BF16: 2}
_NUMPY_LE = {Dtype.F64: "<f8", Dtype.F32: "<f4", Dtype.F16: "<f2"}


def byte_size(dtype: Dtype) -> int:
    return dtype.byte_size


def as_matrix(values) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array; 1-D input becomes 1 x n."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeError(f"expected rank <= 2, got shape {m.shape}")
    return np.ascontiguousarray(m)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


def sub(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    _check_same_shape(a, b, "sub")
    return a - b


def frobenius_norm(m) -> float:
    flat = as_matrix(m).ravel()
    return float(np.sqrt(np.sum(flat * flat)))


def widen(raw: bytes, dtype: Dtype, rows: int, cols: int) -> np.ndarray:
    """Decode little-endian storage bytes into an F64 ``rows x cols`` matrix.

    NaN payloads survive the widening; callers decide what to do with them.
    """
    expected = rows * cols * dtype.byte_size
    if len(raw) != expected:
        raise ShapeError(
            f"widen: {len(raw)} bytes for {rows}x{cols} {dtype.value}, expected {expected}"
        )
    if dtype is Dtype.BF16:
        half = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
        values = (half << 16).view(np.float32)
    else:
        values = np.frombuffer(raw, dtype=_NUMPY_LE[dtype])
    return values.astype(np.float64).reshape(rows, cols)


def narrow(m, dtype: Dtype) -> bytes:
    """Encode an F64 array into little-endian storage bytes (round to nearest even)."""
    values = np.ascontiguousarray(np.asarray(m, dtype=np.float64)).ravel()
    if dtype is Dtype.BF16:
        bits = values.astype(np.float32).view(np.uint32)
        rounded = (bits + np.uint32(0x7FFF) + ((bits >> 16) & np.uint32(1))) >> 16
        nan = np.isnan(values)
        rounded[nan] = (bits[nan] >> 16) | np.uint32(0x0040)
        return rounded.astype("<u2").tobytes()
    return values.astype(_NUMPY_LE[dtype]).tobytes()
