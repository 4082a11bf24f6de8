"""Inference-path convolution algorithms and the analytic multiplication-count model.

Four routes compute the same cross-correlation: a direct shift-and-accumulate
reference, im2row / im2col lowering followed by one GEMM, and tiled Winograd.
The Winograd route pads the input so the valid output extent is a multiple of
the tile stride m, extracts overlapping (m+r-1)^2 tiles, transforms them,
accumulates Hadamard products over input channels in the Winograd domain
(one channel-GEMM per Winograd coordinate), applies the output transform once
per tile, and trims the surplus rows/cols.  With a non-float QSpec every
stage output passes through fake quantization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    RATIONAL,
    Rational,
    ShapeError,
    Tensor4,
    apply_storage,
    conv_out_dim,
    field_of,
    im2col_lower,
    im2row_lower,
    is_rational_dtype,
    pad_nchw,
    rational,
    sandwich_array,
)
from .quantization import QSpec, quantize_to_bits
from .transforms import WinogradTransform


class UnsupportedAlgoError(ValueError):
    """Algorithm/shape combination with no implementation (e.g. strided Winograd)."""


WINOGRAD_TILE_SIZES = (2, 4, 6)


@dataclass(frozen=True)
class ConvShape:
    in_ch: int
    out_ch: int
    in_h: int
    in_w: int
    k: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.k not in (3, 5):
            raise ShapeError(f"kernel size must be 3 or 5, got {self.k}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        # raises on non-integral or < 1 output dims
        conv_out_dim(self.in_h, self.k, self.stride, self.pad)
        conv_out_dim(self.in_w, self.k, self.stride, self.pad)

    @property
    def out_h(self) -> int:
        return conv_out_dim(self.in_h, self.k, self.stride, self.pad)

    @property
    def out_w(self) -> int:
        return conv_out_dim(self.in_w, self.k, self.stride, self.pad)


@dataclass(frozen=True)
class ConvAlgo:
    """One of direct | im2row | im2col | winograd(m)."""

    kind: str
    m: int | None = None

    def __post_init__(self):
        if self.kind not in ("direct", "im2row", "im2col", "winograd"):
            raise ValueError(f"unknown algorithm kind {self.kind!r}")
        if self.kind == "winograd":
            if self.m not in WINOGRAD_TILE_SIZES:
                raise ValueError(f"winograd tile m must be one of {WINOGRAD_TILE_SIZES}")
        elif self.m is not None:
            raise ValueError(f"{self.kind} takes no tile size")

    @property
    def name(self) -> str:
        return f"wg{self.m}" if self.kind == "winograd" else self.kind

    @classmethod
    def parse(cls, s: str) -> "ConvAlgo":
        s = s.strip().lower()
        if s.startswith("wg"):
            return cls("winograd", int(s[2:]))
        if s.startswith("winograd"):
            return cls("winograd", int(s.removeprefix("winograd").strip("()- ")))
        return cls(s)

    def validate_for(self, shape: ConvShape) -> None:
        if self.kind == "winograd" and shape.stride != 1:
            raise UnsupportedAlgoError("winograd convolution requires stride 1")


def _check_filter(x: Tensor4, w: Tensor4, shape: ConvShape) -> None:
    if w.shape[1:] != (shape.in_ch, shape.k, shape.k):
        raise ShapeError(f"filter shape {w.shape} inconsistent with {shape}")
    if w.n != shape.out_ch:
        raise ShapeError(f"filter out_ch {w.n} != {shape.out_ch}")
    if (x.c, x.h, x.w) != (shape.in_ch, shape.in_h, shape.in_w):
        raise ShapeError(f"input shape {x.shape} inconsistent with {shape}")


def conv2d_direct(x: Tensor4, w: Tensor4, shape: ConvShape) -> Tensor4:
    """Reference cross-correlation: y[n,o,i,j] = sum x[n,c,i*s+u-p,j*s+v-p] w[o,c,u,v]."""
    _check_filter(x, w, shape)
    s, k = shape.stride, shape.k
    oh, ow = shape.out_h, shape.out_w
    xp = pad_nchw(x.data, shape.pad, shape.pad, shape.pad, shape.pad)
    acc = None
    for u in range(k):
        for v in range(k):
            window = xp[:, :, u:u + (oh - 1) * s + 1:s, v:v + (ow - 1) * s + 1:s]
            term = np.einsum("ncij,oc->noij", window, w.data[:, :, u, v])
            acc = term if acc is None else acc + term
    return Tensor4(apply_storage(acc, x.storage), x.storage)


def _lowered_conv(x: Tensor4, w: Tensor4, shape: ConvShape, via: str) -> Tensor4:
    _check_filter(x, w, shape)
    oh, ow = shape.out_h, shape.out_w
    wc = w.data.reshape(shape.out_ch, shape.in_ch * shape.k * shape.k)
    if via == "im2row":
        rows = im2row_lower(x, shape.k, shape.k, shape.stride, shape.pad)
        flat = rows.data @ wc.T  # (n*oh*ow, out_ch)
        out = flat.reshape(x.n, oh, ow, shape.out_ch).transpose(0, 3, 1, 2)
    else:
        cols = im2col_lower(x, shape.k, shape.k, shape.stride, shape.pad)
        flat = wc @ cols.data  # (out_ch, n*oh*ow)
        out = flat.reshape(shape.out_ch, x.n, oh, ow).transpose(1, 0, 2, 3)
    return Tensor4(apply_storage(np.ascontiguousarray(out), x.storage), x.storage)


def conv2d_im2row(x: Tensor4, w: Tensor4, shape: ConvShape) -> Tensor4:
    return _lowered_conv(x, w, shape, "im2row")


def conv2d_im2col(x: Tensor4, w: Tensor4, shape: ConvShape) -> Tensor4:
    return _lowered_conv(x, w, shape, "im2col")


@dataclass(frozen=True)
class WinogradWeights:
    """Filters pre-transformed to the Winograd domain, (out_ch, in_ch, t, t)."""

    data: np.ndarray
    m: int
    r: int

    @property
    def memory_ratio(self) -> Rational:
        t = self.m + self.r - 1
        return rational(t * t, self.r * self.r)


def filter_transform(w: Tensor4, tf: WinogradTransform) -> WinogradWeights:
    """U = G g G^T per (out_ch, in_ch) filter; done once and reused per inference."""
    if w.shape[2:] != (tf.r, tf.r):
        raise ShapeError(f"filter spatial dims {w.shape[2:]} != ({tf.r}, {tf.r})")
    G = tf.G.data
    if is_rational_dtype(w.data) != is_rational_dtype(G):
        raise ShapeError("filter and transform must share a scalar field")
    U = sandwich_array(G, w.data)
    return WinogradWeights(U, tf.m, tf.r)


def winograd_tile_counts(shape: ConvShape, m: int):
    th = -(-shape.out_h // m)
    tw = -(-shape.out_w // m)
    return th, tw


def extract_tiles(x: Tensor4, shape: ConvShape, tf: WinogradTransform) -> np.ndarray:
    """Overlapping (t x t) tiles at stride m covering the padded valid output grid."""
    m, t = tf.m, tf.tile
    th, tw = winograd_tile_counts(shape, m)
    extra_h = th * m - shape.out_h
    extra_w = tw * m - shape.out_w
    xp = pad_nchw(x.data, shape.pad, shape.pad + extra_h, shape.pad, shape.pad + extra_w)
    tiles = np.lib.stride_tricks.sliding_window_view(xp, (t, t), axis=(2, 3))
    return tiles[:, :, ::m, ::m]  # (n, c, th, tw, t, t)


def hadamard_accumulate(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Channel reduction in the Winograd domain: one GEMM per (i, j) coordinate."""
    return np.einsum("ocij,ncxyij->noxyij", U, V, optimize=True)


def assemble_output(Yt: np.ndarray, shape: ConvShape, m: int) -> np.ndarray:
    """Stitch (n, o, th, tw, m, m) output tiles and trim the surplus padding."""
    n, o, th, tw = Yt.shape[:4]
    full = Yt.transpose(0, 1, 2, 4, 3, 5).reshape(n, o, th * m, tw * m)
    return np.ascontiguousarray(full[:, :, :shape.out_h, :shape.out_w])


def conv2d_winograd(
    x: Tensor4,
    w: Tensor4,
    tf: WinogradTransform,
    shape: ConvShape,
    qspec: QSpec = QSpec.float32(),
    quantize_before_accumulate: bool = False,
) -> Tensor4:
    """Tiled Winograd convolution with optional per-stage fake quantization.

    `quantize_before_accumulate` additionally quantizes each per-channel
    Hadamard product before the channel sum (the default accumulates in
    float64 and quantizes only the stage output).
    """
    if shape.stride != 1:
        raise UnsupportedAlgoError("winograd convolution requires stride 1")
    if shape.k != tf.r:
        raise ShapeError(f"kernel size {shape.k} != transform r {tf.r}")
    _check_filter(x, w, shape)

    exact = field_of(x.data) == RATIONAL
    if exact and not qspec.is_float:
        raise UnsupportedAlgoError("quantization is undefined for rational tensors")
    bits = QSpec.FLOAT32_BITS if qspec.is_float else qspec.bits

    G, Bt, At = tf.G.data, tf.Bt.data, tf.At.data
    xq = x if exact else Tensor4(quantize_to_bits(x.data, bits), x.storage)
    wq = w.data if exact else quantize_to_bits(w.data, bits)

    U = sandwich_array(G, wq)
    V = sandwich_array(Bt, extract_tiles(xq, shape, tf))
    if not exact:
        U = quantize_to_bits(U, bits)
        V = quantize_to_bits(V, bits)

    if quantize_before_accumulate and not exact and bits != QSpec.FLOAT32_BITS:
        prods = np.einsum("ocij,ncxyij->nocxyij", U, V)
        H = quantize_to_bits(prods, bits).sum(axis=2)
    else:
        H = hadamard_accumulate(U, V)
    if not exact:
        H = quantize_to_bits(H, bits)

    Yt = sandwich_array(At, H)
    out = assemble_output(Yt, shape, tf.m)
    if not exact:
        out = quantize_to_bits(out, bits)
    return Tensor4(apply_storage(out, x.storage), x.storage)


def conv2d(
    x: Tensor4,
    w: Tensor4,
    shape: ConvShape,
    algo: ConvAlgo,
    tf: WinogradTransform | None = None,
    qspec: QSpec = QSpec.float32(),
) -> Tensor4:
    """Dispatch over the algorithm enum (the NAS candidate surface)."""
    algo.validate_for(shape)
    if algo.kind == "direct":
        return conv2d_direct(x, w, shape)
    if algo.kind == "im2row":
        return conv2d_im2row(x, w, shape)
    if algo.kind == "im2col":
        return conv2d_im2col(x, w, shape)
    if tf is None or tf.m != algo.m:
        raise ShapeError(f"algorithm {algo.name} needs a matching transform")
    return conv2d_winograd(x, w, tf, shape, qspec)


def count_mults(algo: ConvAlgo, shape: ConvShape) -> int:
    """General (Hadamard / inner-product) multiplications for one inference."""
    algo.validate_for(shape)
    oh, ow = shape.out_h, shape.out_w
    if algo.kind in ("direct", "im2row", "im2col"):
        return oh * ow * shape.k * shape.k * shape.in_ch * shape.out_ch
    t = algo.m + shape.k - 1
    th, tw = -(-oh // algo.m), -(-ow // algo.m)
    return th * tw * t * t * shape.in_ch * shape.out_ch


def transform_element_ops(algo: ConvAlgo, shape: ConvShape) -> int:
    """Multiplications spent inside the input and output transforms.

    Input: two (t x t)(t x t) GEMMs per tile per input channel.  Output: an
    (m x t)(t x t) and an (m x t)(t x m) GEMM per tile per output channel.
    Filter transform cost is amortized across inferences and excluded.
    """
    if algo.kind != "winograd":
        return 0
    m = algo.m
    t = m + shape.k - 1
    th, tw = winograd_tile_counts(shape, m)
    tiles = th * tw
    input_ops = tiles * shape.in_ch * 2 * t * t * t
    output_ops = tiles * shape.out_ch * (m * t * t + m * m * t)
    return input_ops + output_ops


def maxpool2x2(x: Tensor4) -> Tensor4:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    v = x.data[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2)
    if is_rational_dtype(x.data):
        out = np.maximum(np.maximum(v[:, :, :, 0, :, 0], v[:, :, :, 0, :, 1]),
                         np.maximum(v[:, :, :, 1, :, 0], v[:, :, :, 1, :, 1]))
    else:
        out = v.max(axis=(3, 5))
    return Tensor4(np.ascontiguousarray(out), x.storage)


def conv2d_maxpool_stride_replace(
    x: Tensor4,
    w: Tensor4,
    shape: ConvShape,
    algo: ConvAlgo = ConvAlgo("direct"),
    tf: WinogradTransform | None = None,
    qspec: QSpec = QSpec.float32(),
) -> Tensor4:
    """Replace a stride-2 convolution by 2x2 max-pool followed by a stride-1 conv.

    Strided Winograd has no known formulation, so this substitution is what
    lets any stride-2 position host a Winograd candidate.
    """
    if shape.stride != 2:
        raise ShapeError("replacement applies to stride-2 shapes only")
    pooled = maxpool2x2(x)
    inner = ConvShape(
        in_ch=shape.in_ch,
        out_ch=shape.out_ch,
        in_h=pooled.h,
        in_w=pooled.w,
        k=shape.k,
        stride=1,
        pad=shape.pad,
    )
    return conv2d(pooled, w, inner, algo, tf=tf, qspec=qspec)
