"""Desk-scale model presets.

``micro-resnet``: 8 conv layers in three residual blocks with a max-pool +
conv transition standing in for the stride-2 convolution (strided Winograd
has no formulation).  The input conv always stays on im2row; when the model
is Winograd-aware the last block is pinned to F2.

``lenet-q``: the 5x5-filter testbed (two conv layers) exercising
F(m x m, 5 x 5) tiles.

``tiny-cnn``: 4 conv layers / 3 searchable positions, sized for search smoke
runs.
"""

from __future__ import annotations

import numpy as np

from ..quantization import QSpec
from ..transforms import make_transform
from ..winograd_conv import ConvAlgo
from .layers import (
    BatchNorm,
    DirectConvLayer,
    FullyConnected,
    GlobalAvgPool,
    MaxPool2x2,
    Model,
    ReLU,
    ResidualAdd,
    WaConvLayer,
)

PRESETS = ("micro-resnet", "lenet-q", "tiny-cnn")


def qspec_for_bits(bits: int, momentum: float = 0.99) -> QSpec:
    if bits == 32:
        return QSpec.float32()
    return QSpec(bits=bits, observer_momentum=momentum)


def parse_model_algo(algo: str):
    """Preset algo strings: direct | im2row | im2col | wa-f2 | wa-f4 | wa-f6."""
    algo = algo.lower()
    if algo.startswith("wa-f"):
        return ConvAlgo("winograd", int(algo.removeprefix("wa-f")))
    return ConvAlgo.parse(algo)


def _conv(name, in_ch, out_ch, k, pad, algo: ConvAlgo, qspec, flex, role, rng):
    """Conv layer per policy: input role and non-winograd algos use lowering."""
    if algo.kind == "winograd" and role != "input":
        m = 2 if role == "last_block" else algo.m
        tf = make_transform(m, k).to_float()
        return WaConvLayer(name, in_ch, out_ch, tf, pad=pad, qspec=qspec,
                           learnable_tf=flex, role=role, rng=rng)
    kind = "im2row" if algo.kind in ("winograd", "direct") and role == "input" else algo.kind
    if kind == "winograd":
        kind = "im2row"
    return DirectConvLayer(name, in_ch, out_ch, k=k, pad=pad, qspec=qspec,
                           algo=kind, role=role, rng=rng)


def micro_resnet(algo: str = "direct", bits: int = 32, flex: bool = False,
                 in_ch: int = 1, num_classes: int = 4, width: int = 8,
                 size: int = 16, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    q = qspec_for_bits(bits)
    a = parse_model_algo(algo)
    w1, w2 = width, 2 * width
    L: list = []

    def conv(name, ci, co, role="mid"):
        L.append(_conv(name, ci, co, 3, 1, a, q, flex, role, rng))

    conv("stem", in_ch, w1, role="input")
    L.append(BatchNorm("stem_bn", w1))
    L.append(ReLU("stem_relu"))
    skip1 = len(L) - 1
    conv("b1c1", w1, w1)
    L.append(BatchNorm("b1c1_bn", w1))
    L.append(ReLU("b1c1_relu"))
    conv("b1c2", w1, w1)
    L.append(BatchNorm("b1c2_bn", w1))
    L.append(ResidualAdd(skip1, "b1_add"))
    L.append(ReLU("b1_relu"))
    L.append(MaxPool2x2("trans_pool"))  # stride-2 replacement
    conv("trans", w1, w2)
    L.append(BatchNorm("trans_bn", w2))
    L.append(ReLU("trans_relu"))
    skip2 = len(L) - 1
    conv("b2c1", w2, w2)
    L.append(BatchNorm("b2c1_bn", w2))
    L.append(ReLU("b2c1_relu"))
    conv("b2c2", w2, w2)
    L.append(BatchNorm("b2c2_bn", w2))
    L.append(ResidualAdd(skip2, "b2_add"))
    L.append(ReLU("b2_relu"))
    skip3 = len(L) - 1
    conv("b3c1", w2, w2, role="last_block")
    L.append(BatchNorm("b3c1_bn", w2))
    L.append(ReLU("b3c1_relu"))
    conv("b3c2", w2, w2, role="last_block")
    L.append(BatchNorm("b3c2_bn", w2))
    L.append(ResidualAdd(skip3, "b3_add"))
    L.append(ReLU("b3_relu"))
    L.append(GlobalAvgPool())
    L.append(FullyConnected("fc", w2, num_classes, qspec=q, rng=rng))

    meta = dict(preset="micro-resnet", algo=algo, bits=bits, flex=flex,
                width=width, size=size, in_ch=in_ch, num_classes=num_classes)
    return Model(L, (in_ch, size, size), num_classes, meta=meta)


def lenet_q(algo: str = "direct", bits: int = 32, flex: bool = False,
            num_classes: int = 10, size: int = 28, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    q = qspec_for_bits(bits)
    a = parse_model_algo(algo)
    L: list = [
        _conv("c1", 1, 8, 5, 2, a, q, flex, "mid", rng),
        ReLU("c1_relu"),
        MaxPool2x2("p1"),
        _conv("c2", 8, 16, 5, 2, a, q, flex, "mid", rng),
        ReLU("c2_relu"),
        MaxPool2x2("p2"),
        GlobalAvgPool(),
        FullyConnected("fc", 16, num_classes, qspec=q, rng=rng),
    ]
    meta = dict(preset="lenet-q", algo=algo, bits=bits, flex=flex,
                size=size, in_ch=1, num_classes=num_classes)
    return Model(L, (1, size, size), num_classes, meta=meta)


def tiny_cnn(algo: str = "direct", bits: int = 32, flex: bool = False,
             in_ch: int = 1, num_classes: int = 4, width: int = 8,
             size: int = 16, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    q = qspec_for_bits(bits)
    a = parse_model_algo(algo)
    L: list = [
        _conv("stem", in_ch, width, 3, 1, a, q, flex, "input", rng),
        BatchNorm("stem_bn", width),
        ReLU("stem_relu"),
        _conv("c2", width, width, 3, 1, a, q, flex, "mid", rng),
        BatchNorm("c2_bn", width),
        ReLU("c2_relu"),
        MaxPool2x2("pool"),
        _conv("c3", width, width, 3, 1, a, q, flex, "mid", rng),
        BatchNorm("c3_bn", width),
        ReLU("c3_relu"),
        _conv("c4", width, width, 3, 1, a, q, flex, "mid", rng),
        BatchNorm("c4_bn", width),
        ReLU("c4_relu"),
        GlobalAvgPool(),
        FullyConnected("fc", width, num_classes, qspec=q, rng=rng),
    ]
    meta = dict(preset="tiny-cnn", algo=algo, bits=bits, flex=flex,
                width=width, size=size, in_ch=in_ch, num_classes=num_classes)
    return Model(L, (in_ch, size, size), num_classes, meta=meta)


BUILDERS = {"micro-resnet": micro_resnet, "lenet-q": lenet_q, "tiny-cnn": tiny_cnn}


def build_preset(preset: str, **kwargs) -> Model:
    if preset not in BUILDERS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    return BUILDERS[preset](**kwargs)
