"""Optimizers (SGD with Nesterov momentum, Adam) and learning-rate schedules.

Parameters are updated in place so that layers, checkpoints and the optimizer
all observe the same arrays.  Adam supports a per-step entry mask with
per-entry step counts, which is what lets the architecture stage touch only
the sampled candidates.
"""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, min_lr: float = 0.0) -> float:
    if total_epochs <= 1:
        return base_lr
    frac = epoch / (total_epochs - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


def constant_lr(base_lr: float, epoch: int, total_epochs: int, min_lr: float = 0.0) -> float:
    return base_lr


SCHEDULES = {"cosine": cosine_lr, "constant": constant_lr}


class SGDNesterov:
    """v = mu*v + g;  p -= lr * (g + mu*v)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.01,
                 momentum: float = 0.9, lr_scales: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.lr_scales = lr_scales or {}
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], keys=None):
        """Update all parameters, or only `keys` (path-sampling leaves the rest,
        including their momentum, untouched)."""
        for k in (self.params if keys is None else keys):
            p = self.params[k]
            g = grads[k]
            v = self.velocity[k]
            v *= self.momentum
            v += g
            lr = self.lr * self.lr_scales.get(k, 1.0)
            p -= lr * (g + self.momentum * v)


class Adam:
    """Adam with bias correction; beta1=0 keeps no first-moment state to speak of.

    ``step(grads, mask=...)`` updates only masked entries, advancing their
    per-entry step counts, so unmasked entries stay bitwise identical.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scales: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scales = lr_scales or {}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: np.zeros(v.shape, dtype=np.int64) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], mask: dict[str, np.ndarray] | None = None):
        for k in grads:
            p = self.params[k]
            g = grads[k]
            sel = None if mask is None else mask[k].astype(bool)
            if sel is not None and not sel.any():
                continue
            if sel is None:
                self.t[k] += 1
                t = self.t[k]
                m = self.m[k]
                v = self.v[k]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** t)
                vhat = v / (1 - self.beta2 ** t)
                lr = self.lr * self.lr_scales.get(k, 1.0)
                p -= lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                self.t[k][sel] += 1
                t = self.t[k][sel]
                gm = g[sel]
                self.m[k][sel] = self.beta1 * self.m[k][sel] + (1 - self.beta1) * gm
                self.v[k][sel] = self.beta2 * self.v[k][sel] + (1 - self.beta2) * gm * gm
                mhat = self.m[k][sel] / (1 - self.beta1 ** t)
                vhat = self.v[k][sel] / (1 - self.beta2 ** t)
                lr = self.lr * self.lr_scales.get(k, 1.0)
                p[sel] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, params, lr, lr_scales=None, momentum=0.9,
                   beta1=0.9, beta2=0.999):
    if kind == "adam":
        return Adam(params, lr=lr, beta1=beta1, beta2=beta2, lr_scales=lr_scales)
    if kind == "sgd":
        return SGDNesterov(params, lr=lr, momentum=momentum, lr_scales=lr_scales)
    raise ValueError(f"unknown optimizer {kind!r}")
