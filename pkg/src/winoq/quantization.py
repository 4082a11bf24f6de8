"""Per-tensor symmetric uniform quantization with EMA range observers.

Fake quantization maps a tensor onto the grid {-qmax..qmax} * scale and back,
so training sees the rounding error while parameters stay real-valued.
Gradients use a clipped straight-through estimator: they pass unchanged where
the input lies inside the representable range and are zeroed outside it.
There is no zero-point; the grid is symmetric around 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import ShapeError, Tensor4


class StateError(RuntimeError):
    """Observer consumed before it saw any data."""


@dataclass(frozen=True)
class QSpec:
    """Bit width plus the observer momentum used for activation ranges."""

    FLOAT32_BITS = 32

    bits: int = 8
    observer_momentum: float = 0.99

    def __post_init__(self):
        if self.bits != self.FLOAT32_BITS and not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in 2..16 or 32, got {self.bits}")
        if not 0.0 <= self.observer_momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.observer_momentum}")

    @property
    def is_float(self) -> bool:
        return self.bits == self.FLOAT32_BITS

    @classmethod
    def float32(cls) -> "QSpec":
        return cls(bits=cls.FLOAT32_BITS)

    @property
    def qmax(self) -> int:
        if self.is_float:
            raise ValueError("FLOAT32 spec has no quantization grid")
        return 2 ** (self.bits - 1) - 1

    def to_config(self) -> dict:
        if self.is_float:
            return {"bits": "float32"}
        return {"bits": self.bits, "momentum": self.observer_momentum}

    @classmethod
    def from_config(cls, doc: dict) -> "QSpec":
        bits = doc["bits"]
        if bits == "float32":
            bits = cls.FLOAT32_BITS
        return cls(bits=int(bits), observer_momentum=float(doc.get("momentum", 0.99)))


@dataclass(frozen=True)
class QParams:
    """Resolved grid: positive scale and symmetric integer bound."""

    scale: float
    qmax: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def range_abs(self) -> float:
        return self.qmax * self.scale


@dataclass
class RangeObserver:
    """EMA of per-tensor max-abs; first update snaps to the observed value.

    momentum 0 tracks the current tensor exactly (the weight-observer mode);
    activation observers default to 0.99.
    """

    momentum: float = 0.99
    running_max_abs: float = 0.0
    initialized: bool = False

    def update(self, x) -> None:
        arr = x.data if isinstance(x, Tensor4) else np.asarray(x)
        cur = float(np.max(np.abs(arr))) if arr.size else 0.0
        if not self.initialized:
            self.running_max_abs = cur
            self.initialized = True
        else:
            self.running_max_abs = (
                self.momentum * self.running_max_abs + (1.0 - self.momentum) * cur
            )

    def state(self) -> dict:
        return {
            "momentum": self.momentum,
            "running_max_abs": self.running_max_abs,
            "initialized": self.initialized,
        }

    @classmethod
    def from_state(cls, doc: dict) -> "RangeObserver":
        return cls(
            momentum=float(doc["momentum"]),
            running_max_abs=float(doc["running_max_abs"]),
            initialized=bool(doc["initialized"]),
        )


def observer_update(obs: RangeObserver, x) -> RangeObserver:
    """Functional form of RangeObserver.update: returns the advanced observer."""
    out = replace(obs)
    out.update(x)
    return out


def qparams_from(obs: RangeObserver, spec: QSpec) -> QParams:
    if spec.is_float:
        raise ValueError("FLOAT32 spec produces no QParams")
    if not obs.initialized:
        raise StateError("observer has never been updated")
    qmax = spec.qmax
    if obs.running_max_abs == 0.0:
        return QParams(scale=1.0, qmax=qmax)  # degenerate all-zero tensor
    return QParams(scale=obs.running_max_abs / qmax, qmax=qmax)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _fq_array(arr: np.ndarray, qp: QParams) -> np.ndarray:
    q = _round_half_away(arr / qp.scale)
    return np.clip(q, -qp.qmax, qp.qmax) * qp.scale


def fake_quant(x, qp: QParams):
    """Quantize-dequantize onto the symmetric grid; rounding is half-away-from-zero."""
    if isinstance(x, Tensor4):
        return Tensor4(_fq_array(x.data, qp), x.storage)
    return _fq_array(np.asarray(x, dtype=np.float64), qp)


def ste_mask(x, qp: QParams) -> np.ndarray:
    """1 where |x| is inside the representable range, 0 where the clamp saturated."""
    arr = x.data if isinstance(x, Tensor4) else np.asarray(x)
    return (np.abs(arr) <= qp.range_abs).astype(np.float64)


def fake_quant_backward(grad_out, x, qp: QParams):
    """Clipped straight-through gradient of fake_quant."""
    g = grad_out.data if isinstance(grad_out, Tensor4) else np.asarray(grad_out)
    xa = x.data if isinstance(x, Tensor4) else np.asarray(x)
    if g.shape != xa.shape:
        raise ShapeError(f"grad shape {g.shape} != input shape {xa.shape}")
    out = g * (np.abs(xa) <= qp.range_abs)
    if isinstance(grad_out, Tensor4):
        return Tensor4(out, grad_out.storage)
    return out


def quantize_to_bits(arr: np.ndarray, bits: int) -> np.ndarray:
    """One-shot fake quantization with the scale taken from the tensor itself.

    This is the inference-path behavior for a freshly initialized observer;
    bits == 32 is the identity.
    """
    if bits == QSpec.FLOAT32_BITS:
        return arr
    qmax = 2 ** (bits - 1) - 1
    top = float(np.max(np.abs(arr))) if arr.size else 0.0
    if top == 0.0:
        return arr.copy()
    return _fq_array(arr, QParams(scale=top / qmax, qmax=qmax))
