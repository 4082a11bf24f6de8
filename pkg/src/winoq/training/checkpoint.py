"""Checkpoint format: JSON manifest plus one little-endian float64 blob per tensor.

The manifest records the layer graph (constructor configs), quantization
specs, transform points, observer states and BN statistics; tensors live in
``tensors/<hierarchical.path>.bin``.  Save -> load is bit-exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..quantization import QSpec
from ..transforms import PolyPoints
from ..numerics import rational
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

MANIFEST_NAME = "manifest.json"
TENSOR_DIR = "tensors"


def _layer_record(layer, idx):
    rec = {"kind": type(layer).__name__, "name": layer.name}
    if isinstance(layer, WaConvLayer):
        rec.update(
            in_ch=layer.in_ch, out_ch=layer.out_ch, m=layer.m, r=layer.r,
            pad=layer.pad, qspec=layer.qspec.to_config(),
            learnable_tf=layer.learnable_tf, role=layer.role,
            points={
                "finite": [[str(p.numerator), str(p.denominator)]
                           for p in layer._tf_points.finite_points],
                "infinity": layer._tf_points.use_infinity,
            },
        )
    elif isinstance(layer, DirectConvLayer):
        rec.update(in_ch=layer.in_ch, out_ch=layer.out_ch, k=layer.k,
                   stride=layer.stride, pad=layer.pad,
                   qspec=layer.qspec.to_config(), algo=layer.algo, role=layer.role)
    elif isinstance(layer, BatchNorm):
        rec.update(channels=layer.channels, momentum=layer.momentum, eps=layer.eps)
    elif isinstance(layer, FullyConnected):
        rec.update(in_features=layer.in_features, out_features=layer.out_features,
                   qspec=layer.qspec.to_config())
    elif isinstance(layer, ResidualAdd):
        rec.update(source=layer.source)
    elif not isinstance(layer, (ReLU, MaxPool2x2, GlobalAvgPool)):
        raise TypeError(f"cannot checkpoint layer type {type(layer).__name__}")
    return rec


def _layer_tensors(layer, idx):
    out = {f"{idx}.{layer.name}.{k}": v for k, v in layer.params().items()}
    if isinstance(layer, WaConvLayer) and not layer.learnable_tf:
        for k in ("G", "Bt", "At"):
            out[f"{idx}.{layer.name}.{k}"] = getattr(layer, k)
    return out


def save_checkpoint(model: Model, path, extra_meta: dict | None = None) -> None:
    path = Path(path)
    (path / TENSOR_DIR).mkdir(parents=True, exist_ok=True)
    tensors = {}
    records = []
    buffers = {}
    for i, layer in enumerate(model.layers):
        records.append(_layer_record(layer, i))
        tensors.update(_layer_tensors(layer, i))
        buf = layer.buffers()
        if buf:
            buffers[str(i)] = buf
    manifest = {
        "format": "winoq-checkpoint-v1",
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "meta": dict(model.meta, **(extra_meta or {})),
        "layers": records,
        "buffers": buffers,
        "tensors": {k: {"shape": list(v.shape)} for k, v in tensors.items()},
    }
    for name, arr in tensors.items():
        with open(path / TENSOR_DIR / f"{name}.bin", "wb") as fh:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = path / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path / MANIFEST_NAME)


def _build_layer(rec: dict):
    kind = rec["kind"]
    if kind == "WaConvLayer":
        pts = PolyPoints(
            tuple(rational(p[0]) / rational(p[1]) for p in rec["points"]["finite"]),
            use_infinity=rec["points"]["infinity"],
        )
        from ..transforms import cook_toom_1d

        tf = cook_toom_1d(rec["m"], rec["r"], pts).to_float()
        return WaConvLayer(rec["name"], rec["in_ch"], rec["out_ch"], tf,
                           pad=rec["pad"], qspec=QSpec.from_config(rec["qspec"]),
                           learnable_tf=rec["learnable_tf"], role=rec["role"])
    if kind == "DirectConvLayer":
        return DirectConvLayer(rec["name"], rec["in_ch"], rec["out_ch"], k=rec["k"],
                               stride=rec["stride"], pad=rec["pad"],
                               qspec=QSpec.from_config(rec["qspec"]),
                               algo=rec["algo"], role=rec["role"])
    if kind == "BatchNorm":
        return BatchNorm(rec["name"], rec["channels"], rec["momentum"], rec["eps"])
    if kind == "FullyConnected":
        return FullyConnected(rec["name"], rec["in_features"], rec["out_features"],
                              qspec=QSpec.from_config(rec["qspec"]))
    if kind == "ResidualAdd":
        return ResidualAdd(rec["source"], rec["name"])
    if kind == "ReLU":
        return ReLU(rec["name"])
    if kind == "MaxPool2x2":
        return MaxPool2x2(rec["name"])
    if kind == "GlobalAvgPool":
        return GlobalAvgPool(rec["name"])
    raise TypeError(f"unknown layer kind {kind!r} in manifest")


def load_checkpoint(path) -> Model:
    path = Path(path)
    with open(path / MANIFEST_NAME) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "winoq-checkpoint-v1":
        raise ValueError(f"not a winoq checkpoint: {path}")
    layers = [_build_layer(rec) for rec in manifest["layers"]]
    for i, layer in enumerate(layers):
        buf = manifest["buffers"].get(str(i))
        if buf:
            layer.load_buffers(buf)
    for name, info in manifest["tensors"].items():
        idx, _, rest = name.partition(".")
        lname, _, pname = rest.rpartition(".")
        layer = layers[int(idx)]
        with open(path / TENSOR_DIR / f"{name}.bin", "rb") as fh:
            arr = np.frombuffer(fh.read(), dtype="<f8").reshape(info["shape"]).copy()
        target = getattr(layer, pname)
        target[...] = arr
    model = Model(layers, tuple(manifest["input_shape"]), manifest["num_classes"],
                  meta=manifest["meta"])
    return model
