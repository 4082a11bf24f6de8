"""Construction, validation, analysis and serialization of Winograd transform triples.

A triple (G, Bt, At) for F(m x m, r x r) is synthesized from interpolation
points by the Cook-Toom procedure: G evaluates the filter polynomial at each
point, Bt is the scaled Lagrange interpolation operator applied to the input
tile, and At re-evaluates the m output positions.  The point at infinity is
handled through leading coefficients.  Scale factors are folded so that each
row of G carries 1/f_i and the matching row of Bt carries f_i; the Hadamard
stage cancels them, so exact 1D equivalence

    At @ ((G @ g) * (Bt @ d)) == valid outputs of correlating d with g

holds identically in rational arithmetic.  2D behavior follows by nesting the
same matrices as sandwiches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import gmpy2
import numpy as np

from .numerics import (
    Mat,
    Rational,
    ShapeError,
    is_rational_dtype,
    rational,
    rational_array,
    rational_zeros,
    to_float,
)
from .quantization import QSpec, quantize_to_bits


class ConstructionError(ValueError):
    """Invalid interpolation points (duplicates or wrong count)."""


class ConfigurationError(ValueError):
    """Unsupported (m, r) pair without user-supplied points."""


# Shipped default finite point sets, keyed by tile size m + r - 1 (the point
# at infinity is always included).  The small sets are the standard consensus
# choices; the larger ones extend them with reciprocal pairs to keep the
# matrix entries tame.  Overridable from the CLI; correctness never depends
# on the choice, numerical quality does.
_DEFAULT_FINITE_POINTS = {
    4: ("0", "1", "-1"),
    6: ("0", "1", "-1", "2", "-2"),
    8: ("0", "1", "-1", "2", "-2", "1/2", "-1/2"),
    10: ("0", "1", "-1", "2", "-2", "1/2", "-1/2", "4", "-4"),
}

SUPPORTED_CONFIGS = ((2, 3), (4, 3), (6, 3), (2, 5), (4, 5), (6, 5))


@dataclass(frozen=True)
class PolyPoints:
    """Interpolation points: pairwise-distinct finite rationals plus optional infinity."""

    finite_points: tuple
    use_infinity: bool = True

    def __post_init__(self):
        pts = tuple(rational(p) for p in self.finite_points)
        object.__setattr__(self, "finite_points", pts)
        if len(set(pts)) != len(pts):
            raise ConstructionError(f"duplicate interpolation points in {pts}")

    def count(self) -> int:
        return len(self.finite_points) + (1 if self.use_infinity else 0)


@dataclass(frozen=True)
class WinogradTransform:
    """The (G, Bt, At) triple for one F(m x m, r x r) configuration."""

    m: int
    r: int
    G: Mat
    Bt: Mat
    At: Mat
    points: PolyPoints
    learnable: bool = False

    def __post_init__(self):
        t = self.m + self.r - 1
        if self.G.data.shape != (t, self.r):
            raise ShapeError(f"G must be {t}x{self.r}, got {self.G.data.shape}")
        if self.Bt.data.shape != (t, t):
            raise ShapeError(f"Bt must be {t}x{t}, got {self.Bt.data.shape}")
        if self.At.data.shape != (self.m, t):
            raise ShapeError(f"At must be {self.m}x{t}, got {self.At.data.shape}")

    @property
    def tile(self) -> int:
        return self.m + self.r - 1

    def to_float(self) -> "WinogradTransform":
        return replace(
            self, G=self.G.to_float(), Bt=self.Bt.to_float(), At=self.At.to_float()
        )

    def with_matrices(self, G: np.ndarray, Bt: np.ndarray, At: np.ndarray):
        return replace(self, G=Mat(G), Bt=Mat(Bt), At=Mat(At))


def _poly_mul(p, q):
    out = [gmpy2.mpq(0)] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] += a * b
    return out


def cook_toom_1d(m: int, r: int, points: PolyPoints) -> WinogradTransform:
    """Synthesize the exact rational transform triple for F(m, r).

    Requires m >= 1, r >= 2 and exactly m + r - 1 interpolation points.
    """
    if m < 1 or r < 2:
        raise ConfigurationError(f"need m >= 1 and r >= 2, got m={m} r={r}")
    t = m + r - 1
    if points.count() != t:
        raise ShapeError(
            f"F({m},{r}) needs {t} points, got {points.count()}"
        )
    finite = list(points.finite_points)

    # Per-point normalizers f_i = prod_{j != i} (a_i - a_j); 1 for infinity.
    f = []
    for i, a in enumerate(finite):
        v = gmpy2.mpq(1)
        for j, b in enumerate(finite):
            if i != j:
                v *= a - b
        f.append(v)

    def eval_rows(width):
        rows = [[a ** j for j in range(width)] for a in finite]
        if points.use_infinity:
            rows.append([gmpy2.mpq(0)] * (width - 1) + [gmpy2.mpq(1)])
        return rows

    # G: filter evaluation, row i divided by f_i.
    G = rational_zeros((t, r))
    for i, row in enumerate(eval_rows(r)):
        scale = f[i] if i < len(finite) else gmpy2.mpq(1)
        for j, v in enumerate(row):
            G[i, j] = v / scale

    # At: output evaluation, transposed.
    At = rational_zeros((m, t))
    for i, row in enumerate(eval_rows(m)):
        for j, v in enumerate(row):
            At[j, i] = v

    # Bt: row i holds f_i times the coefficients of the i-th Lagrange basis
    # polynomial; the infinity row holds the full node polynomial.
    Bt = rational_zeros((t, t))
    for i, a in enumerate(finite):
        num = [gmpy2.mpq(1)]
        for j, b in enumerate(finite):
            if i != j:
                num = _poly_mul(num, [-b, gmpy2.mpq(1)])
        for k, cfk in enumerate(num):
            Bt[i, k] = cfk  # already divided by f_i, then rescaled by f_i
    if points.use_infinity:
        node = [gmpy2.mpq(1)]
        for b in finite:
            node = _poly_mul(node, [-b, gmpy2.mpq(1)])
        for k, cfk in enumerate(node):
            Bt[len(finite), k] = cfk

    return WinogradTransform(m, r, Mat(G), Mat(Bt), Mat(At), points)


def default_points(m: int, r: int) -> PolyPoints:
    """Shipped default point set for a supported (m, r) configuration."""
    if (m, r) not in SUPPORTED_CONFIGS:
        raise ConfigurationError(
            f"no default points for F({m},{r}); supply --points explicitly"
        )
    finite = _DEFAULT_FINITE_POINTS[m + r - 1]
    return PolyPoints(tuple(rational(p) for p in finite), use_infinity=True)


def make_transform(m: int, r: int, points: PolyPoints | None = None) -> WinogradTransform:
    return cook_toom_1d(m, r, points if points is not None else default_points(m, r))


def sparsity(mat: Mat) -> Rational:
    """Fraction of exact-zero entries, as an exact rational."""
    flat = mat.data.reshape(-1)
    zeros = sum(1 for v in flat if v == 0)
    return rational(zeros, flat.size)


@dataclass(frozen=True)
class ErrorStats:
    """Relative-error summary of a quantized pipeline against exact convolution."""

    mean: float
    max: float
    p95: float
    trials: int


def _direct_corr2d(d: np.ndarray, g: np.ndarray) -> np.ndarray:
    t = d.shape[0]
    r = g.shape[0]
    m = t - r + 1
    out = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            out[i, j] = np.sum(d[i:i + r, j:j + r] * g)
    return out


def quantized_tile_conv(
    d: np.ndarray, g: np.ndarray, tf: WinogradTransform, bits: int
) -> np.ndarray:
    """Single-tile 2D Winograd convolution with fake quantization at every stage."""
    G, Bt, At = tf.G.data, tf.Bt.data, tf.At.data
    if is_rational_dtype(G):
        G, Bt, At = to_float(G), to_float(Bt), to_float(At)
    dq = quantize_to_bits(d, bits)
    gq = quantize_to_bits(g, bits)
    U = quantize_to_bits(G @ gq @ G.T, bits)
    V = quantize_to_bits(Bt @ dq @ Bt.T, bits)
    H = quantize_to_bits(U * V, bits)
    Y = At @ H @ At.T
    return quantize_to_bits(Y, bits)


def _error_samples(tf: WinogradTransform, bits: int, trials: int, rng_seed: int):
    """Per-trial element-wise relative errors of the fake-quantized pipeline.

    Relative error uses max(|direct|, 1e-8) per element to avoid blow-up near
    zero outputs.
    """
    if bits != QSpec.FLOAT32_BITS and not 2 <= bits <= 16:
        raise ConfigurationError(f"bits must be 2..16 or 32, got {bits}")
    rng = np.random.default_rng(rng_seed)
    t, r = tf.tile, tf.r
    for _ in range(trials):
        d = rng.uniform(-1.0, 1.0, (t, t))
        g = rng.uniform(-1.0, 1.0, (r, r))
        ref = _direct_corr2d(d, g)
        got = quantized_tile_conv(d, g, tf, bits)
        yield (np.abs(got - ref) / np.maximum(np.abs(ref), 1e-8)).reshape(-1)


def transform_error_profile(
    tf: WinogradTransform, bits: int, trials: int, rng_seed: int
) -> ErrorStats:
    """Relative-error statistics over uniform [-1, 1] random tile/filter pairs."""
    allerr = np.concatenate(list(_error_samples(tf, bits, trials, rng_seed)))
    return ErrorStats(
        mean=float(allerr.mean()),
        max=float(allerr.max()),
        p95=float(np.percentile(allerr, 95)),
        trials=trials,
    )


def transform_error_trials(tf: WinogradTransform, bits: int, trials: int, rng_seed: int):
    """(per-trial mean, per-trial max) relative-error arrays, for CSV export."""
    means, maxes = [], []
    for rel in _error_samples(tf, bits, trials, rng_seed):
        means.append(rel.mean())
        maxes.append(rel.max())
    return np.array(means), np.array(maxes)


def hadamard_mults_per_tile(tf: WinogradTransform) -> int:
    """Exactly (m + r - 1)^2 general multiplications per tile."""
    return tf.tile * tf.tile


def mults_per_output(tf: WinogradTransform) -> Rational:
    return rational(tf.tile * tf.tile, tf.m * tf.m)


# --- serialization ----------------------------------------------------------
#
# Transform files are JSON: rationals as ["num", "den"] string pairs, floats
# as IEEE-754 hex strings (bit-exact round trip either way).


def _encode_scalar(v):
    if isinstance(v, (float, np.floating)):
        return struct.pack(">d", float(v)).hex()
    q = rational(v)
    return [str(q.numerator), str(q.denominator)]


def _decode_scalar(v):
    if isinstance(v, str):
        return struct.unpack(">d", bytes.fromhex(v))[0]
    return rational(v[0]) / rational(v[1])


def _encode_mat(m: Mat):
    return [[_encode_scalar(v) for v in row] for row in m.data]


def _decode_mat(rows) -> Mat:
    exact = rows and isinstance(rows[0][0], list)
    if exact:
        return Mat(rational_array([[_decode_scalar(v) for v in row] for row in rows]))
    return Mat(np.array([[_decode_scalar(v) for v in row] for row in rows]))


def transform_to_dict(tf: WinogradTransform) -> dict:
    return {
        "m": tf.m,
        "r": tf.r,
        "points": {
            "finite": [
                [str(p.numerator), str(p.denominator)] for p in tf.points.finite_points
            ],
            "infinity": tf.points.use_infinity,
        },
        "G": _encode_mat(tf.G),
        "Bt": _encode_mat(tf.Bt),
        "At": _encode_mat(tf.At),
    }


def transform_from_dict(doc: dict, learnable: bool = False) -> WinogradTransform:
    pts = PolyPoints(
        tuple(rational(p[0]) / rational(p[1]) for p in doc["points"]["finite"]),
        use_infinity=doc["points"]["infinity"],
    )
    return WinogradTransform(
        m=int(doc["m"]),
        r=int(doc["r"]),
        G=_decode_mat(doc["G"]),
        Bt=_decode_mat(doc["Bt"]),
        At=_decode_mat(doc["At"]),
        points=pts,
        learnable=learnable,
    )


def save_transform(tf: WinogradTransform, path) -> None:
    with open(path, "w") as fh:
        json.dump(transform_to_dict(tf), fh, indent=1)
        fh.write("\n")


def load_transform(path, learnable: bool = False) -> WinogradTransform:
    with open(path) as fh:
        return transform_from_dict(json.load(fh), learnable=learnable)
