"""Layer zoo with analytic backpropagation, including gradients of the transforms.

Every layer follows the same protocol: ``forward(x, mode)`` returns the output
array and stashes whatever the backward pass needs, ``backward(grad_out)``
returns the input gradient and accumulates parameter gradients into
``self.grads``.  Modes are ``train`` (observers advance, context saved),
``warmup`` (observers advance, nothing else changes) and ``eval`` (frozen).

The Winograd-aware layer runs tile extraction -> input transform -> Hadamard
channel reduction -> output transform with a fake-quantization node after
every stage.  Its backward pass is the chain rule through those matrix
sandwiches with a clipped straight-through estimator at each node; when the
transforms are learnable their gradients accumulate over all tiles, channels
and batch items.
"""

from __future__ import annotations

import numpy as np

from ..numerics import ShapeError, Tensor4, conv_out_dim, pad_nchw, sandwich_array
from ..quantization import QSpec, RangeObserver, StateError, fake_quant, qparams_from
from ..transforms import WinogradTransform
from ..winograd_conv import ConvShape, hadamard_accumulate

MODES = ("train", "eval", "warmup")

_EINSUM_KW = {"optimize": True}


class QNode:
    """One fake-quantization point: an observer plus the STE bookkeeping.

    Weight-like nodes use momentum 0 (track the current tensor exactly);
    activation-like nodes use the configured EMA momentum.
    """

    def __init__(self, qspec: QSpec, momentum: float | None = None):
        self.qspec = qspec
        if momentum is None:
            momentum = qspec.observer_momentum
        self.observer = RangeObserver(momentum=momentum)

    def forward(self, arr: np.ndarray, mode: str):
        """Returns (quantized, (pre_quant, qparams)); identity under FLOAT32."""
        if self.qspec.is_float:
            return arr, (None, None)
        if mode in ("train", "warmup"):
            self.observer.update(arr)
        qp = qparams_from(self.observer, self.qspec)
        return fake_quant(arr, qp), (arr, qp)

    @staticmethod
    def backward(grad: np.ndarray, ctx) -> np.ndarray:
        pre, qp = ctx
        if qp is None:
            return grad
        return grad * (np.abs(pre) <= qp.qmax * qp.scale)


class Layer:
    """Shared plumbing: named parameters, gradient slots, persisted buffers."""

    name = "layer"
    role = "mid"  # input | mid | last_block; drives algo policy in presets

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}
        self.ctx = None

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params().items()}

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def buffers(self) -> dict:
        return {}

    def load_buffers(self, doc: dict):
        pass


def _require_ctx(layer: Layer):
    if layer.ctx is None:
        raise StateError(f"{layer.name}: backward without a matching train forward")


class WaConvLayer(Layer):
    """Winograd-aware convolution: the quantized tiled pipeline, stride 1."""

    QNODE_NAMES = ("input", "weights", "U", "V", "hadamard", "output")

    def __init__(self, name: str, in_ch: int, out_ch: int, tf: WinogradTransform,
                 pad: int = 1, qspec: QSpec = QSpec.float32(),
                 learnable_tf: bool = False, role: str = "mid",
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.name = name
        self.role = role
        self.in_ch, self.out_ch = in_ch, out_ch
        self.pad = pad
        self.qspec = qspec
        self.learnable_tf = learnable_tf
        self.r = tf.r
        self.m = tf.m
        tf = tf if tf.G.field == "float64" else tf.to_float()
        self.G = tf.G.data.copy()
        self.Bt = tf.Bt.data.copy()
        self.At = tf.At.data.copy()
        self._tf_points = tf.points
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * self.r * self.r
        self.weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, self.r, self.r))
        self.qnodes = {
            n: QNode(qspec, momentum=0.0 if n in ("weights", "U") else None)
            for n in self.QNODE_NAMES
        }
        self.zero_grads()

    @property
    def tile(self) -> int:
        return self.m + self.r - 1

    def params(self):
        out = {"weights": self.weights}
        if self.learnable_tf:
            out.update({"G": self.G, "Bt": self.Bt, "At": self.At})
        return out

    def conv_shape(self, h: int, w: int) -> ConvShape:
        return ConvShape(self.in_ch, self.out_ch, h, w, self.r, 1, self.pad)

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        cs = self.conv_shape(h, w)
        return (n, self.out_ch, cs.out_h, cs.out_w)

    def _tiles(self, xq: np.ndarray, cs: ConvShape):
        m, t = self.m, self.tile
        th, tw = -(-cs.out_h // m), -(-cs.out_w // m)
        xp = pad_nchw(xq, self.pad, self.pad + th * m - cs.out_h,
                      self.pad, self.pad + tw * m - cs.out_w)
        tiles = np.lib.stride_tricks.sliding_window_view(xp, (t, t), axis=(2, 3))
        return tiles[:, :, ::m, ::m], th, tw

    def forward(self, x: np.ndarray, mode: str = "train"):
        n, c, h, w = x.shape
        cs = self.conv_shape(h, w)
        xq, ctx_in = self.qnodes["input"].forward(x, mode)
        tiles, th, tw = self._tiles(xq, cs)

        gq, ctx_w = self.qnodes["weights"].forward(self.weights, mode)
        U = sandwich_array(self.G, gq)
        Uq, ctx_U = self.qnodes["U"].forward(U, mode)

        V = sandwich_array(self.Bt, tiles)
        Vq, ctx_V = self.qnodes["V"].forward(V, mode)

        H = hadamard_accumulate(Uq, Vq)
        Hq, ctx_H = self.qnodes["hadamard"].forward(H, mode)

        Yt = sandwich_array(self.At, Hq)
        full = Yt.transpose(0, 1, 2, 4, 3, 5).reshape(n, self.out_ch, th * self.m, tw * self.m)
        Y = np.ascontiguousarray(full[:, :, :cs.out_h, :cs.out_w])
        yq, ctx_out = self.qnodes["output"].forward(Y, mode)

        if mode == "train":
            self.ctx = dict(cs=cs, th=th, tw=tw, tiles=tiles, gq=gq, Uq=Uq, Vq=Vq,
                            Hq=Hq, ctx_in=ctx_in, ctx_w=ctx_w, ctx_U=ctx_U,
                            ctx_V=ctx_V, ctx_H=ctx_H, ctx_out=ctx_out)
        else:
            self.ctx = None
        return yq

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        _require_ctx(self)
        c = self.ctx
        cs, th, tw, m, t = c["cs"], c["th"], c["tw"], self.m, self.tile

        gY = QNode.backward(grad_out, c["ctx_out"])
        n = gY.shape[0]
        full = np.zeros((n, self.out_ch, th * m, tw * m))
        full[:, :, :cs.out_h, :cs.out_w] = gY
        gYt = full.reshape(n, self.out_ch, th, m, tw, m).transpose(0, 1, 2, 4, 3, 5)

        # output transform: Y = At @ Hq @ At.T per tile
        dHq = np.einsum("ai,noxyab,bj->noxyij", self.At, gYt, self.At, **_EINSUM_KW)
        if self.learnable_tf:
            self.grads["At"] += (
                np.einsum("noxyab,bc,noxydc->ad", gYt, self.At, c["Hq"], **_EINSUM_KW)
                + np.einsum("noxyba,bc,noxycd->ad", gYt, self.At, c["Hq"], **_EINSUM_KW)
            )
        dH = QNode.backward(dHq, c["ctx_H"])

        # Hadamard channel reduction
        dUq = np.einsum("noxyij,ncxyij->ocij", dH, c["Vq"], **_EINSUM_KW)
        dVq = np.einsum("noxyij,ocij->ncxyij", dH, c["Uq"], **_EINSUM_KW)

        # filter transform: U = G @ gq @ G.T
        dU = QNode.backward(dUq, c["ctx_U"])
        dgq = np.einsum("ia,pqik,kb->pqab", self.G, dU, self.G, **_EINSUM_KW)
        if self.learnable_tf:
            self.grads["G"] += (
                np.einsum("pqab,bc,pqdc->ad", dU, self.G, c["gq"], **_EINSUM_KW)
                + np.einsum("pqba,bc,pqcd->ad", dU, self.G, c["gq"], **_EINSUM_KW)
            )
        self.grads["weights"] += QNode.backward(dgq, c["ctx_w"])

        # input transform: V = Bt @ d @ Bt.T per tile
        dV = QNode.backward(dVq, c["ctx_V"])
        dtiles = np.einsum("ia,ncxyij,jb->ncxyab", self.Bt, dV, self.Bt, **_EINSUM_KW)
        if self.learnable_tf:
            self.grads["Bt"] += (
                np.einsum("pqxyab,bc,pqxydc->ad", dV, self.Bt, c["tiles"], **_EINSUM_KW)
                + np.einsum("pqxyba,bc,pqxycd->ad", dV, self.Bt, c["tiles"], **_EINSUM_KW)
            )

        # overlap-add the tile gradients back onto the padded input grid
        hp = th * m + self.r - 1
        wp = tw * m + self.r - 1
        dxp = np.zeros((n, self.in_ch, hp, wp))
        for a in range(th):
            for b in range(tw):
                dxp[:, :, a * m:a * m + t, b * m:b * m + t] += dtiles[:, :, a, b]
        dxq = dxp[:, :, self.pad:self.pad + cs.in_h, self.pad:self.pad + cs.in_w]
        dx = QNode.backward(dxq, c["ctx_in"])
        self.ctx = None
        return dx

    def buffers(self):
        return {"observers": {k: v.observer.state() for k, v in self.qnodes.items()}}

    def load_buffers(self, doc):
        for k, st in doc.get("observers", {}).items():
            self.qnodes[k].observer = RangeObserver.from_state(st)


def wa_forward(layer: WaConvLayer, x: Tensor4, mode: str = "train"):
    """Run the layer on a Tensor4, returning (y, saved context)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    y = layer.forward(x.data, mode)
    return Tensor4(y), layer.ctx


def wa_backward(layer: WaConvLayer, ctx, grad_y: Tensor4) -> dict:
    """Gradients for every input of the pipeline, keyed d_input/d_weights/d_G/...

    d_G/d_Bt/d_At are exact zeros when the transforms are frozen.
    """
    if ctx is None or ctx is not layer.ctx:
        raise StateError(f"{layer.name}: stale or mismatched context")
    layer.zero_grads()
    d_input = layer.backward(grad_y.data)
    zeros = {k: np.zeros_like(getattr(layer, k)) for k in ("G", "Bt", "At")}
    out = {"d_input": Tensor4(d_input), "d_weights": layer.grads["weights"]}
    for k in ("G", "Bt", "At"):
        out[f"d_{k}"] = layer.grads.get(k, zeros[k])
    return out


class DirectConvLayer(Layer):
    """Plain convolution via im2row lowering (direct and im2row are the same math)."""

    QNODE_NAMES = ("input", "weights", "output")

    def __init__(self, name: str, in_ch: int, out_ch: int, k: int = 3,
                 stride: int = 1, pad: int = 1, qspec: QSpec = QSpec.float32(),
                 algo: str = "im2row", role: str = "mid",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if algo not in ("direct", "im2row", "im2col"):
            raise ValueError(f"DirectConvLayer algo must be lowering-style, got {algo}")
        self.name = name
        self.role = role
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.pad = stride, pad
        self.qspec = qspec
        self.algo = algo
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        self.weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k))
        self.qnodes = {
            n: QNode(qspec, momentum=0.0 if n == "weights" else None)
            for n in self.QNODE_NAMES
        }
        self.zero_grads()

    def params(self):
        return {"weights": self.weights}

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        oh = conv_out_dim(h, self.k, self.stride, self.pad)
        ow = conv_out_dim(w, self.k, self.stride, self.pad)
        return (n, self.out_ch, oh, ow)

    def _lower(self, xq: np.ndarray, oh: int, ow: int) -> np.ndarray:
        xp = pad_nchw(xq, self.pad, self.pad, self.pad, self.pad)
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        win = win[:, :, ::self.stride, ::self.stride]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, self.in_ch * self.k * self.k)

    def forward(self, x: np.ndarray, mode: str = "train"):
        n, c, h, w = x.shape
        oh = conv_out_dim(h, self.k, self.stride, self.pad)
        ow = conv_out_dim(w, self.k, self.stride, self.pad)
        xq, ctx_in = self.qnodes["input"].forward(x, mode)
        gq, ctx_w = self.qnodes["weights"].forward(self.weights, mode)
        rows = self._lower(xq, oh, ow)
        wc = gq.reshape(self.out_ch, -1)
        y = (rows @ wc.T).reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2)
        y = np.ascontiguousarray(y)
        yq, ctx_out = self.qnodes["output"].forward(y, mode)
        if mode == "train":
            self.ctx = dict(rows=rows, gq=gq, hw=(h, w), ohw=(oh, ow),
                            ctx_in=ctx_in, ctx_w=ctx_w, ctx_out=ctx_out)
        else:
            self.ctx = None
        return yq

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        _require_ctx(self)
        c = self.ctx
        h, w = c["hw"]
        oh, ow = c["ohw"]
        gY = QNode.backward(grad_out, c["ctx_out"])
        n = gY.shape[0]
        flat_g = gY.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dwc = flat_g.T @ c["rows"]
        dgq = dwc.reshape(self.out_ch, self.in_ch, self.k, self.k)
        self.grads["weights"] += QNode.backward(dgq, c["ctx_w"])
        drows = flat_g @ c["gq"].reshape(self.out_ch, -1)
        dr = drows.reshape(n, oh, ow, self.in_ch, self.k, self.k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, self.in_ch, h + 2 * self.pad, w + 2 * self.pad))
        s = self.stride
        for u in range(self.k):
            for v in range(self.k):
                dxp[:, :, u:u + (oh - 1) * s + 1:s, v:v + (ow - 1) * s + 1:s] += dr[:, :, :, :, u, v]
        dxq = dxp[:, :, self.pad:self.pad + h, self.pad:self.pad + w]
        dx = QNode.backward(dxq, c["ctx_in"])
        self.ctx = None
        return dx

    def buffers(self):
        return {"observers": {k: v.observer.state() for k, v in self.qnodes.items()}}

    def load_buffers(self, doc):
        for k, st in doc.get("observers", {}).items():
            self.qnodes[k].observer = RangeObserver.from_state(st)


class ReLU(Layer):
    name = "relu"

    def __init__(self, name="relu"):
        super().__init__()
        self.name = name

    def forward(self, x, mode="train"):
        if mode == "train":
            self.ctx = x > 0
        else:
            self.ctx = None
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        _require_ctx(self)
        dx = grad_out * self.ctx
        self.ctx = None
        return dx


class MaxPool2x2(Layer):
    def __init__(self, name="pool"):
        super().__init__()
        self.name = name

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, c, h // 2, w // 2)

    def forward(self, x, mode="train"):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        v = x[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2)
        v = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = v.argmax(axis=4)
        out = np.take_along_axis(v, idx[..., None], axis=4)[..., 0]
        if mode == "train":
            self.ctx = (idx, x.shape)
        else:
            self.ctx = None
        return out

    def backward(self, grad_out):
        _require_ctx(self)
        idx, xshape = self.ctx
        n, c, h, w = xshape
        oh, ow = h // 2, w // 2
        dv = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(dv, idx[..., None], grad_out[..., None], axis=4)
        dx = np.zeros(xshape)
        dx[:, :, :oh * 2, :ow * 2] = (
            dv.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)
        )
        self.ctx = None
        return dx


class BatchNorm(Layer):
    """Standard per-channel batch norm; EMA statistics (momentum 0.9) for eval."""

    def __init__(self, name: str, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.zero_grads()

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, mode="train"):
        # warmup is an eval-style pass: quantization observers advance elsewhere,
        # BN statistics stay frozen so the pass never changes model behavior
        if mode == "train":
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        std = np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) / std[None, :, None, None]
        y = self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]
        if mode == "train":
            self.ctx = (xhat, std)
        else:
            self.ctx = None
        return y

    def backward(self, grad_out):
        _require_ctx(self)
        xhat, std = self.ctx
        axes = (0, 2, 3)
        self.grads["beta"] += grad_out.sum(axis=axes)
        self.grads["gamma"] += (grad_out * xhat).sum(axis=axes)
        g = self.gamma[None, :, None, None]
        mean_g = grad_out.mean(axis=axes, keepdims=True)
        mean_gx = (grad_out * xhat).mean(axis=axes, keepdims=True)
        dx = (g / std[None, :, None, None]) * (grad_out - mean_g - xhat * mean_gx)
        self.ctx = None
        return dx

    def buffers(self):
        return {"running_mean": self.running_mean.tolist(),
                "running_var": self.running_var.tolist()}

    def load_buffers(self, doc):
        self.running_mean = np.array(doc["running_mean"])
        self.running_var = np.array(doc["running_var"])


class GlobalAvgPool(Layer):
    name = "gap"

    def __init__(self, name="gap"):
        super().__init__()
        self.name = name

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, c)

    def forward(self, x, mode="train"):
        if mode == "train":
            self.ctx = x.shape
        else:
            self.ctx = None
        return x.mean(axis=(2, 3))

    def backward(self, grad_out):
        _require_ctx(self)
        n, c, h, w = self.ctx
        dx = np.broadcast_to(grad_out[:, :, None, None], (n, c, h, w)) / (h * w)
        self.ctx = None
        return np.ascontiguousarray(dx)


class FullyConnected(Layer):
    QNODE_NAMES = ("input", "weights", "output")

    def __init__(self, name: str, in_features: int, out_features: int,
                 qspec: QSpec = QSpec.float32(), rng: np.random.Generator | None = None):
        super().__init__()
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.qspec = qspec
        rng = rng or np.random.default_rng(0)
        self.weights = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features))
        self.bias = np.zeros(out_features)
        self.qnodes = {
            n: QNode(qspec, momentum=0.0 if n == "weights" else None)
            for n in self.QNODE_NAMES
        }
        self.zero_grads()

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def out_shape(self, shape):
        n, f = shape
        if f != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} features, got {f}")
        return (n, self.out_features)

    def forward(self, x, mode="train"):
        xq, ctx_in = self.qnodes["input"].forward(x, mode)
        wq, ctx_w = self.qnodes["weights"].forward(self.weights, mode)
        y = xq @ wq.T + self.bias
        yq, ctx_out = self.qnodes["output"].forward(y, mode)
        if mode == "train":
            self.ctx = (xq, wq, ctx_in, ctx_w, ctx_out)
        else:
            self.ctx = None
        return yq

    def backward(self, grad_out):
        _require_ctx(self)
        xq, wq, ctx_in, ctx_w, ctx_out = self.ctx
        g = QNode.backward(grad_out, ctx_out)
        self.grads["bias"] += g.sum(axis=0)
        self.grads["weights"] += QNode.backward(g.T @ xq, ctx_w)
        dx = QNode.backward(g @ wq, ctx_in)
        self.ctx = None
        return dx

    def buffers(self):
        return {"observers": {k: v.observer.state() for k, v in self.qnodes.items()}}

    def load_buffers(self, doc):
        for k, st in doc.get("observers", {}).items():
            self.qnodes[k].observer = RangeObserver.from_state(st)


class ResidualAdd(Layer):
    """Adds the output of an earlier layer (identity skip); wired by the Model."""

    def __init__(self, source: int, name="residual"):
        super().__init__()
        self.name = name
        self.source = source

    def forward(self, x, mode="train"):  # pragma: no cover - Model handles this
        raise RuntimeError("ResidualAdd is executed by the Model")

    def backward(self, grad_out):  # pragma: no cover
        raise RuntimeError("ResidualAdd is executed by the Model")


class Model:
    """Ordered layer list with skip wiring, shape-checked at build time."""

    def __init__(self, layers: list[Layer], input_shape: tuple, num_classes: int,
                 meta: dict | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)  # (c, h, w)
        self.num_classes = num_classes
        self.meta = dict(meta or {})
        self.validate()

    def validate(self):
        shape = (1,) + self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                if not 0 <= layer.source < i:
                    raise ShapeError(f"residual source {layer.source} out of range at {i}")
                if shapes[layer.source] != shape:
                    raise ShapeError(
                        f"residual operands differ: {shapes[layer.source]} vs {shape}"
                    )
            else:
                shape = layer.out_shape(shape)
            shapes.append(shape)
        if shape != (1, self.num_classes):
            raise ShapeError(f"model emits {shape}, expected (n, {self.num_classes})")

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        acts = []
        h = x
        for layer in self.layers:
            if isinstance(layer, ResidualAdd):
                h = h + acts[layer.source]
            else:
                h = layer.forward(h, mode)
            acts.append(h)
        return h

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        out_grads: list = [None] * len(self.layers)
        out_grads[-1] = grad_logits
        g_in = None
        for i in range(len(self.layers) - 1, -1, -1):
            g = out_grads[i]
            if g is None:
                raise StateError("gradient bookkeeping hole; forward/backward mismatch")
            layer = self.layers[i]
            if isinstance(layer, ResidualAdd):
                src = layer.source
                out_grads[src] = g if out_grads[src] is None else out_grads[src] + g
                g_in = g
            else:
                g_in = layer.backward(g)
            if i > 0:
                out_grads[i - 1] = g_in if out_grads[i - 1] is None else out_grads[i - 1] + g_in
        return g_in

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{layer.name}.{k}"] = v
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params():
                out[f"{i}.{layer.name}.{k}"] = layer.grads[k]
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def conv_layers(self):
        return [l for l in self.layers if isinstance(l, (WaConvLayer, DirectConvLayer))]

    def param_count(self) -> int:
        return sum(v.size for v in self.parameters().values())
