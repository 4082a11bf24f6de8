"""Training, evaluation, warmup and adaptation loops.

Everything here is deterministic under a fixed seed: batch order comes from a
seeded generator, updates are single-threaded, and reports contain no wall
times.  A NaN loss aborts with the step and the first offending layer.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field, replace

import numpy as np

from ..data_io import Dataset
from ..transforms import make_transform
from ..winograd_conv import ConvAlgo
from .layers import DirectConvLayer, Model, WaConvLayer
from .optim import SCHEDULES, make_optimizer


class TrainAbort(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    min_lr: float = 0.0
    optimizer: str = "adam"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0  # the L2 coefficient on the weights loss
    include_transforms_l2: bool = False
    transform_lr_scale: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    log_csv: str | None = None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, lr, train_loss, train_acc, val_acc

    @property
    def final_val_acc(self) -> float:
        return self.epochs[-1]["val_acc"] if self.epochs else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "lr", "train_loss", "train_acc", "val_acc"]
            )
            writer.writeheader()
            for row in self.epochs:
                writer.writerow(row)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_weights(logits: np.ndarray, labels: np.ndarray, params, lambda0: float = 0.0):
    """Mean cross-entropy plus lambda0 * sum ||w||^2; returns (loss, grad_logits).

    The L2 gradient (2*lambda0*w per parameter) is applied at the optimizer
    step, not through grad_logits.
    """
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels out of range for {k} classes")
    p = softmax(logits)
    ce = -np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean()
    l2 = 0.0
    if lambda0:
        arrays = params.values() if isinstance(params, dict) else params
        l2 = lambda0 * sum(float((w * w).sum()) for w in arrays)
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return ce + l2, grad / n


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _transform_param(path: str) -> bool:
    return path.rsplit(".", 1)[-1] in ("G", "Bt", "At")


def _l2_params(model: Model, schedule: TrainSchedule) -> dict:
    params = model.parameters()
    if schedule.include_transforms_l2:
        return params
    return {k: v for k, v in params.items() if not _transform_param(k)}


def _diagnose_nan(model: Model) -> str:
    for i, layer in enumerate(model.layers):
        for k, v in layer.params().items():
            if not np.all(np.isfinite(v)):
                return f"layer {i} ({layer.name}) parameter {k}"
        for k, v in layer.grads.items():
            if not np.all(np.isfinite(v)):
                return f"layer {i} ({layer.name}) gradient {k}"
    return "loss head"


def evaluate(model: Model, ds: Dataset, batch_size: int = 256, mode: str = "eval") -> float:
    """Accuracy in [0, 1] over a dataset."""
    hits = 0
    for start in range(0, len(ds), batch_size):
        xb = ds.images[start:start + batch_size]
        yb = ds.labels[start:start + batch_size]
        logits = model.forward(xb, mode=mode)
        hits += int((logits.argmax(axis=1) == yb).sum())
    return hits / max(len(ds), 1)


def warmup(model: Model, ds: Dataset, batch_size: int = 256) -> None:
    """One forward-only pass updating observers and BN statistics, never parameters."""
    for start in range(0, len(ds), batch_size):
        model.forward(ds.images[start:start + batch_size], mode="warmup")


def train(model: Model, dataset, schedule: TrainSchedule) -> TrainReport:
    """Epoch loop of forward/backward/step; logs per-epoch metrics.

    ``dataset`` is either a Dataset (split per schedule) or a (train, val)
    pair of Datasets.
    """
    if isinstance(dataset, Dataset):
        train_ds, val_ds = dataset.split(schedule.val_fraction, schedule.seed)
    else:
        train_ds, val_ds = dataset
    rng = np.random.default_rng(schedule.seed)
    params = model.parameters()
    lr_scales = {
        k: schedule.transform_lr_scale for k in params if _transform_param(k)
    }
    opt = make_optimizer(
        schedule.optimizer, params, schedule.lr, lr_scales=lr_scales,
        momentum=schedule.momentum, beta1=schedule.betas[0], beta2=schedule.betas[1],
    )
    lr_fn = SCHEDULES[schedule.lr_schedule]
    l2_params = _l2_params(model, schedule)
    report = TrainReport()
    step = 0
    for epoch in range(schedule.epochs):
        opt.lr = lr_fn(schedule.lr, epoch, schedule.epochs, schedule.min_lr)
        order = rng.permutation(len(train_ds))
        losses, accs = [], []
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            xb, yb = train_ds.images[idx], train_ds.labels[idx]
            model.zero_grads()
            logits = model.forward(xb, mode="train")
            loss, grad_logits = loss_weights(logits, yb, l2_params, schedule.weight_decay)
            if not np.isfinite(loss):
                raise TrainAbort(f"NaN loss at step {step} in {_diagnose_nan(model)}")
            model.backward(grad_logits)
            grads = model.grads()
            if schedule.weight_decay:
                for k, w in l2_params.items():
                    grads[k] = grads[k] + 2.0 * schedule.weight_decay * w
            opt.step(grads)
            losses.append(loss)
            accs.append(accuracy(logits, yb))
            step += 1
        val_acc = evaluate(model, val_ds) if len(val_ds) else float("nan")
        report.epochs.append({
            "epoch": epoch,
            "lr": opt.lr,
            "train_loss": float(np.mean(losses)),
            "train_acc": float(np.mean(accs)),
            "val_acc": val_acc,
        })
    if schedule.log_csv:
        report.write_csv(schedule.log_csv)
    return report


@dataclass
class AdaptResult:
    model: Model
    trajectory: list  # val accuracy after warmup, then after each epoch
    report: TrainReport


def adapt(pretrained: Model, target_algo: ConvAlgo, learnable_tf: bool, epochs: int,
          dataset=None, schedule: TrainSchedule | None = None) -> AdaptResult:
    """Convert a direct-convolution model to Winograd-aware and fine-tune it.

    Weights are copied, default transforms constructed, observers warmed with
    one forward-only pass, then `epochs` of fine-tuning.  The input layer
    stays on its lowering algorithm; last-block convolutions cap their tile at
    F2 (the same policy the presets use for training from scratch).
    """
    if target_algo.kind != "winograd":
        raise ValueError("adapt targets a winograd algorithm")
    if dataset is None:
        raise ValueError("adapt needs the dataset used for warmup/fine-tuning")
    if isinstance(dataset, Dataset):
        split_seed = schedule.seed if schedule else 0
        frac = schedule.val_fraction if schedule else 0.1
        train_ds, val_ds = dataset.split(frac, split_seed)
    else:
        train_ds, val_ds = dataset

    layers = []
    for layer in pretrained.layers:
        if isinstance(layer, DirectConvLayer) and layer.role != "input":
            if layer.stride != 1:
                raise ValueError(f"{layer.name}: winograd needs stride 1")
            m = 2 if layer.role == "last_block" else target_algo.m
            if layer.k not in (3, 5):
                raise ValueError(f"{layer.name}: kernel {layer.k} has no tile config")
            tf = make_transform(m, layer.k).to_float()
            wa = WaConvLayer(layer.name, layer.in_ch, layer.out_ch, tf,
                             pad=layer.pad, qspec=layer.qspec,
                             learnable_tf=learnable_tf, role=layer.role)
            wa.weights = layer.weights.copy()
            wa.qnodes["input"].observer = replace(layer.qnodes["input"].observer)
            wa.qnodes["weights"].observer = replace(layer.qnodes["weights"].observer)
            wa.qnodes["output"].observer = replace(layer.qnodes["output"].observer)
            layers.append(wa)
        else:
            layers.append(_clone_layer(layer))
    model = Model(layers, pretrained.input_shape, pretrained.num_classes,
                  meta=dict(pretrained.meta, adapted_to=target_algo.name))

    warmup(model, train_ds)
    trajectory = [evaluate(model, val_ds)]
    report = TrainReport()
    if epochs > 0:
        schedule = schedule or TrainSchedule(epochs=epochs)
        schedule = replace(schedule, epochs=epochs)
        report = train(model, (train_ds, val_ds), schedule)
        trajectory.extend(row["val_acc"] for row in report.epochs)
    return AdaptResult(model, trajectory, report)


def _clone_layer(layer):
    return copy.deepcopy(layer)
