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
    wa_backward,
    wa_forward,
)
from .loop import TrainSchedule, TrainReport, adapt, evaluate, loss_weights, train, warmup
from .optim import Adam, SGDNesterov, cosine_lr
from . import presets, checkpoint

__all__ = [
    "Adam",
    "BatchNorm",
    "DirectConvLayer",
    "FullyConnected",
    "GlobalAvgPool",
    "MaxPool2x2",
    "Model",
    "ReLU",
    "ResidualAdd",
    "SGDNesterov",
    "TrainReport",
    "TrainSchedule",
    "WaConvLayer",
    "adapt",
    "checkpoint",
    "cosine_lr",
    "evaluate",
    "loss_weights",
    "presets",
    "train",
    "wa_backward",
    "wa_forward",
    "warmup",
]
