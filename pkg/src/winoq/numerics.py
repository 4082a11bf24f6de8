"""Scalar fields, dense containers and the lowering primitives shared by every module.

Two scalar fields are supported throughout the package:

* ``float64`` -- the default; optionally rounded to float32 at operation
  boundaries when a container's ``storage`` flag is ``"float32"``.
* exact rationals -- arbitrary-precision ``gmpy2.mpq`` values held in
  object-dtype arrays.  No overflow path exists by construction; this field
  backs every exactness oracle in the test suite.

Containers are thin wrappers over row-major numpy arrays.  All operations are
pure: inputs are never mutated and results are freshly allocated.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import gmpy2
import numpy as np

# Canonical exact scalar.  mpq is always reduced, its denominator is always
# positive and zero is 0/1, which is exactly the Rational contract.
Rational = gmpy2.mpq

FLOAT64 = "float64"
RATIONAL = "rational"

_STORAGE_KINDS = ("float64", "float32")


class ShapeError(ValueError):
    """Dimension mismatch or non-integral derived dimension."""


def rational(num, den=1) -> Rational:
    """Build an exact rational from ints, strings ("1/2") or Fractions."""
    if isinstance(num, Fraction):
        q = gmpy2.mpq(num.numerator, num.denominator)
    elif isinstance(num, str):
        q = gmpy2.mpq(num)  # second positional arg would be a parse base
    else:
        q = gmpy2.mpq(num)
    return q if den == 1 else q / gmpy2.mpq(den)


def is_rational_dtype(arr: np.ndarray) -> bool:
    return arr.dtype == object


def field_of(arr: np.ndarray) -> str:
    return RATIONAL if is_rational_dtype(arr) else FLOAT64


def rational_array(values) -> np.ndarray:
    """Object-dtype array with every element coerced to Rational."""
    arr = np.array(values, dtype=object)
    flat = arr.reshape(-1)
    for i, v in enumerate(flat):
        flat[i] = rational(v) if not isinstance(v, type(gmpy2.mpq())) else v
    return flat.reshape(arr.shape)


def rational_zeros(shape) -> np.ndarray:
    arr = np.empty(shape, dtype=object)
    arr.reshape(-1)[:] = [gmpy2.mpq(0)] * arr.size
    return arr


def to_float(arr: np.ndarray) -> np.ndarray:
    """Lossy conversion of an exact array to float64 (identity on floats)."""
    if not is_rational_dtype(arr):
        return np.asarray(arr, dtype=np.float64)
    out = np.empty(arr.shape, dtype=np.float64)
    out.reshape(-1)[:] = [float(v) for v in arr.reshape(-1)]
    return out


def apply_storage(arr: np.ndarray, storage: str) -> np.ndarray:
    """Round a float64 result to its storage precision at an op boundary."""
    if storage == "float32" and not is_rational_dtype(arr):
        return arr.astype(np.float32).astype(np.float64)
    return arr


def _merge_storage(a: str, b: str) -> str:
    return "float32" if "float32" in (a, b) else "float64"


@dataclass(frozen=True)
class Mat:
    """Dense row-major matrix over float64 or exact rationals."""

    data: np.ndarray
    storage: str = "float64"

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"Mat requires 2-d data, got shape {self.data.shape}")
        if self.storage not in _STORAGE_KINDS:
            raise ValueError(f"unknown storage {self.storage!r}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def field(self) -> str:
        return field_of(self.data)

    @classmethod
    def from_rows(cls, rows, field=FLOAT64, storage="float64") -> "Mat":
        if field == RATIONAL:
            return cls(rational_array(rows), storage)
        return cls(apply_storage(np.array(rows, dtype=np.float64), storage), storage)

    @classmethod
    def zeros(cls, rows, cols, field=FLOAT64) -> "Mat":
        if field == RATIONAL:
            return cls(rational_zeros((rows, cols)))
        return cls(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n, field=FLOAT64) -> "Mat":
        if field == RATIONAL:
            out = rational_zeros((n, n))
            for i in range(n):
                out[i, i] = gmpy2.mpq(1)
            return cls(out)
        return cls(np.eye(n))

    def to_float(self) -> "Mat":
        return Mat(to_float(self.data), self.storage)


@dataclass(frozen=True)
class Tensor4:
    """NCHW activation or weight container; all dims >= 1."""

    data: np.ndarray
    storage: str = "float64"

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 requires 4-d data, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"all dims must be >= 1, got {self.data.shape}")
        if self.storage not in _STORAGE_KINDS:
            raise ValueError(f"unknown storage {self.storage!r}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self):
        return self.data.shape

    @property
    def field(self) -> str:
        return field_of(self.data)

    @classmethod
    def from_array(cls, values, field=FLOAT64, storage="float64") -> "Tensor4":
        if field == RATIONAL:
            return cls(rational_array(values), storage)
        return cls(apply_storage(np.array(values, dtype=np.float64), storage), storage)

    def to_float(self) -> "Tensor4":
        return Tensor4(to_float(self.data), self.storage)


def transpose(m: Mat) -> Mat:
    return Mat(m.data.T.copy(), m.storage)


def gemm(a: Mat, b: Mat) -> Mat:
    """Standard matrix product; exact when both operands are rational."""
    if a.cols != b.rows:
        raise ShapeError(f"gemm: inner dims differ, {a.cols} vs {b.rows}")
    out = a.data @ b.data
    storage = _merge_storage(a.storage, b.storage)
    return Mat(apply_storage(out, storage), storage)


def sandwich(m: Mat, x: Mat) -> Mat:
    """Compute m @ x @ m.T for square x; the shape every transform stage takes."""
    if x.rows != x.cols:
        raise ShapeError(f"sandwich: x must be square, got {x.rows}x{x.cols}")
    if m.cols != x.rows:
        raise ShapeError(f"sandwich: m.cols={m.cols} != x.rows={x.rows}")
    out = m.data @ x.data @ m.data.T
    storage = _merge_storage(m.storage, x.storage)
    return Mat(apply_storage(out, storage), storage)


def sandwich_array(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched m @ x @ m.T over the trailing two axes of x."""
    return np.einsum("ij,...jk,lk->...il", m, x, m, optimize=True)


def conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"non-integral output dim: size={size} k={k} stride={stride} pad={pad}"
        )
    out = span // stride + 1
    if out < 1:
        raise ShapeError(f"output dim {out} < 1")
    return out


def pad_nchw(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Zero padding on the spatial dims; works for both scalar fields."""
    if top == bottom == left == right == 0:
        return x
    n, c, h, w = x.shape
    if is_rational_dtype(x):
        out = rational_zeros((n, c, h + top + bottom, w + left + right))
    else:
        out = np.zeros((n, c, h + top + bottom, w + left + right))
    out[:, :, top:top + h, left:left + w] = x
    return out


def im2row_lower(x: Tensor4, kh: int, kw: int, stride: int, pad: int) -> Mat:
    """Materialize receptive fields as rows: (n*outH*outW) x (c*kh*kw).

    Each row is one window flattened channel-major; zero padding outside
    bounds.  Convolution then reduces to this matrix times the flattened
    filter bank.
    """
    out_h = conv_out_dim(x.h, kh, stride, pad)
    out_w = conv_out_dim(x.w, kw, stride, pad)
    xp = pad_nchw(x.data, pad, pad, pad, pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (n, c, outH, outW, kh, kw)
    rows = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
        x.n * out_h * out_w, x.c * kh * kw
    )
    return Mat(apply_storage(np.ascontiguousarray(rows), x.storage), x.storage)


def im2col_lower(x: Tensor4, kh: int, kw: int, stride: int, pad: int) -> Mat:
    """Column-major twin of im2row_lower: (c*kh*kw) x (n*outH*outW)."""
    rows = im2row_lower(x, kh, kw, stride, pad)
    return transpose(rows)
