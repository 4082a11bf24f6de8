"""winoq: Winograd-aware quantized convolution toolkit.

Cook-Toom transform synthesis, quantized Winograd convolution with analytic
backpropagation (including learnable transforms), desk-scale training, a
convolution latency benchmark, and a latency-aware per-layer algorithm
search.
"""

__version__ = "0.1.0"

from . import (
    data_io,
    latency_bench,
    nas,
    numerics,
    quantization,
    training,
    transforms,
    winograd_conv,
)

__all__ = [
    "__version__",
    "data_io",
    "latency_bench",
    "nas",
    "numerics",
    "quantization",
    "training",
    "transforms",
    "winograd_conv",
]
