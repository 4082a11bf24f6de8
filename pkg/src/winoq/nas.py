"""Two-stage latency-aware search over per-layer convolution algorithms.

An over-parameterized supernet holds every candidate implementation of each
searchable 3x3 convolution (the input layer and non-3x3 layers are fixed to
im2row).  Batches alternate between a weight stage, which samples one path
per layer and applies SGD with Nesterov momentum to the active candidates,
and an architecture stage, which samples two distinct candidates per layer,
renormalizes their probabilities pairwise, and updates only the sampled
entries of the architecture parameters with Adam(beta1=0).  The architecture
loss adds an L2 term on the parameters and a differentiable expected-latency
penalty: the probability-weighted sum of each candidate's table latency.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .latency_bench import LatencyTable, TableLookupError
from .transforms import make_transform
from .winograd_conv import ConvAlgo, ConvShape
from .training.layers import DirectConvLayer, Model, ResidualAdd, WaConvLayer
from .training.loop import loss_weights
from .training.optim import Adam, SGDNesterov, cosine_lr
from .training.presets import qspec_for_bits

SPACES = ("wa", "wa-q")
SPACE_ALGOS = ("im2row", "wg2", "wg4", "wg6")
WAQ_BITS = (32, 16, 8)

DERIVATION_WARN_GAP = 0.05  # warn when the top-2 probability gap is this close


@dataclass(frozen=True)
class CandidateOp:
    algo: ConvAlgo
    bits: int

    @property
    def label(self) -> str:
        return f"{self.algo.name}@{self.bits}"


def candidate_space(space: str, base_bits: int) -> list[CandidateOp]:
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}, got {space!r}")
    algos = [ConvAlgo.parse(a) for a in SPACE_ALGOS]
    if space == "wa":
        return [CandidateOp(a, base_bits) for a in algos]
    return [CandidateOp(a, b) for a in algos for b in WAQ_BITS]


def softmax1d(alpha: np.ndarray) -> np.ndarray:
    z = alpha - alpha.max()
    e = np.exp(z)
    return e / e.sum()


def _build_candidate(layer, cand: CandidateOp, rng, shared_weights=None):
    q = qspec_for_bits(cand.bits)
    if cand.algo.kind == "winograd":
        tf = make_transform(cand.algo.m, 3).to_float()
        new = WaConvLayer(layer.name, layer.in_ch, layer.out_ch, tf, pad=layer.pad,
                          qspec=q, learnable_tf=False, role=layer.role, rng=rng)
    else:
        new = DirectConvLayer(layer.name, layer.in_ch, layer.out_ch, k=3, stride=1,
                              pad=layer.pad, qspec=q, algo="im2row",
                              role=layer.role, rng=rng)
    if shared_weights is not None:
        new.weights = shared_weights
    return new


class SuperNet:
    """Macro architecture with a bank of candidate ops at each searchable position."""

    def __init__(self, macro: Model, space: str, base_bits: int, seed: int = 0,
                 share_filters: bool = False):
        self.input_shape = macro.input_shape
        self.num_classes = macro.num_classes
        self.meta = dict(macro.meta)
        self.layers = [copy.deepcopy(l) for l in macro.layers]
        self.space = space
        self.base_bits = base_bits
        self.banks: dict[int, list] = {}
        self.candidates: dict[int, list[CandidateOp]] = {}
        cands = candidate_space(space, base_bits)
        for pos, layer in enumerate(self.layers):
            if not isinstance(layer, (DirectConvLayer, WaConvLayer)):
                continue
            k = layer.k if isinstance(layer, DirectConvLayer) else layer.r
            stride = layer.stride if isinstance(layer, DirectConvLayer) else 1
            if layer.role == "input" or k != 3 or stride != 1:
                continue
            bank, specs = [], []
            shared = None
            for ci, cand in enumerate(cands):
                rng = np.random.default_rng((seed, pos, ci))
                cl = _build_candidate(layer, cand, rng, shared_weights=shared)
                if share_filters and shared is None:
                    shared = cl.weights
                bank.append(cl)
                specs.append(cand)
            self.banks[pos] = bank
            self.candidates[pos] = specs
        if not self.banks:
            raise ValueError("macro model has no searchable layers")
        self._mix = {}

    def searchable_positions(self):
        return sorted(self.banks)

    def init_arch_params(self) -> dict[int, np.ndarray]:
        return {pos: np.zeros(len(self.banks[pos])) for pos in self.banks}

    def layer_shapes(self) -> dict[int, ConvShape]:
        """Conv shape seen by each searchable position (for latency lookups)."""
        out = {}
        shape = (1,) + tuple(self.input_shape)
        for pos, layer in enumerate(self.layers):
            if pos in self.banks:
                n, c, h, w = shape
                out[pos] = ConvShape(layer.in_ch, layer.out_ch, h, w, 3, 1, layer.pad)
            shape = layer.out_shape(shape)
        return out

    def forward(self, x: np.ndarray, active: dict, mode: str = "train") -> np.ndarray:
        """`active` maps position -> list of (candidate index, mixture weight)."""
        acts = []
        h = x
        self._mix = {}
        for pos, layer in enumerate(self.layers):
            if pos in self.banks:
                outs = []
                for ci, p in active[pos]:
                    outs.append((ci, p, self.banks[pos][ci].forward(h, mode)))
                h = sum(p * y for _, p, y in outs)
                self._mix[pos] = outs
            elif isinstance(layer, ResidualAdd):
                h = h + acts[layer.source]
            else:
                h = layer.forward(h, mode)
            acts.append(h)
        return h

    def backward(self, grad_logits: np.ndarray) -> dict[int, dict[int, float]]:
        """Backprop through the sampled mixture.

        Returns per-position {candidate index: dL/d(mixture weight)}; parameter
        gradients accumulate inside the layers as usual.
        """
        grad_p: dict[int, dict[int, float]] = {}
        out_grads: list = [None] * len(self.layers)
        out_grads[-1] = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            g = out_grads[i]
            layer = self.layers[i]
            if i in self.banks:
                grad_p[i] = {}
                g_in = None
                for ci, p, y in self._mix[i]:
                    grad_p[i][ci] = float((g * y).sum())
                    gi = self.banks[i][ci].backward(p * g)
                    g_in = gi if g_in is None else g_in + gi
            elif isinstance(layer, ResidualAdd):
                src = layer.source
                out_grads[src] = g if out_grads[src] is None else out_grads[src] + g
                g_in = g
            else:
                g_in = layer.backward(g)
            if i > 0:
                out_grads[i - 1] = g_in if out_grads[i - 1] is None else out_grads[i - 1] + g_in
        return grad_p

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if i in self.banks:
                for ci, cl in enumerate(self.banks[i]):
                    for k, v in cl.params().items():
                        out[f"{i}.{layer.name}.cand{ci}.{k}"] = v
            else:
                for k, v in layer.params().items():
                    out[f"{i}.{layer.name}.{k}"] = v
        return out

    def grads_for(self, active: dict) -> tuple[dict, set]:
        """(grads dict, active key set) for the sampled subnetwork."""
        grads, keys = {}, set()
        for i, layer in enumerate(self.layers):
            if i in self.banks:
                for ci, _ in active[i]:
                    cl = self.banks[i][ci]
                    for k in cl.params():
                        key = f"{i}.{layer.name}.cand{ci}.{k}"
                        grads[key] = cl.grads[k]
                        keys.add(key)
            else:
                for k in layer.params():
                    key = f"{i}.{layer.name}.{k}"
                    grads[key] = layer.grads[k]
                    keys.add(key)
        return grads, keys

    def zero_grads(self):
        for i, layer in enumerate(self.layers):
            if i in self.banks:
                for cl in self.banks[i]:
                    cl.zero_grads()
            else:
                layer.zero_grads()


def sample_paths(alpha: dict[int, np.ndarray], rng: np.random.Generator,
                 stage: str = "weight") -> dict[int, tuple]:
    """Multinomial path sampling: one candidate per layer in the weight stage,
    two distinct candidates in the arch stage."""
    if stage not in ("weight", "arch"):
        raise ValueError(f"stage must be weight|arch, got {stage!r}")
    out = {}
    for pos in sorted(alpha):
        p = softmax1d(alpha[pos])
        k = len(p)
        want = 1 if stage == "weight" or k == 1 else 2
        idx = rng.choice(k, size=want, replace=False, p=p)
        out[pos] = tuple(int(i) for i in idx)
    return out


def resolve_latencies(supernet: SuperNet, table: LatencyTable) -> dict[int, np.ndarray]:
    """Per searchable position, the latency vector over candidates.

    Raises TableLookupError naming the first missing key.
    """
    shapes = supernet.layer_shapes()
    out = {}
    for pos in supernet.searchable_positions():
        cs = shapes[pos]
        lats = []
        for cand in supernet.candidates[pos]:
            row = table.lookup(cand.algo.name, cs.out_h, cs.out_w,
                               cs.in_ch, cs.out_ch, cand.bits)
            lats.append(row.median_ms)
        out[pos] = np.array(lats)
    return out


def expected_latency(alpha: dict[int, np.ndarray],
                     lats: dict[int, np.ndarray]) -> float:
    """Sum over layers of the probability-weighted candidate latencies."""
    total = 0.0
    for pos, a in alpha.items():
        total += float(softmax1d(a) @ lats[pos])
    return total


def expected_latency_grad(alpha: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """d E / d alpha for one layer: p * (lat - p.lat), the softmax Jacobian row."""
    p = softmax1d(alpha)
    return p * (lats - float(p @ lats))


@dataclass
class SearchSchedule:
    epochs: int
    batch_size: int = 64
    w_lr: float = 0.01
    w_momentum: float = 0.9
    a_lr: float = 1e-3
    lambda0: float = 0.0
    lambda1: float = 1e-4
    lr_schedule: str = "cosine"
    seed: int = 0
    val_fraction: float = 0.2
    arch_on_val: bool = True
    share_filters: bool = False


@dataclass
class SearchState:
    supernet: SuperNet
    alpha: dict
    opt_w: SGDNesterov
    opt_a: Adam
    lats: dict
    lambda0: float
    lambda1: float
    lambda2: float
    rng: np.random.Generator
    step: int = 0


def make_search_state(macro: Model, space: str, table: LatencyTable,
                      lambda2: float, schedule: SearchSchedule,
                      base_bits: int | None = None) -> SearchState:
    bits = base_bits if base_bits is not None else macro.meta.get("bits", 32)
    net = SuperNet(macro, space, bits, seed=schedule.seed,
                   share_filters=schedule.share_filters)
    alpha = net.init_arch_params()
    opt_w = SGDNesterov(net.parameters(), lr=schedule.w_lr, momentum=schedule.w_momentum)
    opt_a = Adam({f"alpha.{pos}": a for pos, a in alpha.items()},
                 lr=schedule.a_lr, beta1=0.0)
    lats = resolve_latencies(net, table)
    return SearchState(net, alpha, opt_w, opt_a, lats,
                       schedule.lambda0, schedule.lambda1, lambda2,
                       np.random.default_rng(schedule.seed))


def weight_step(state: SearchState, xb: np.ndarray, yb: np.ndarray) -> float:
    """Single-path forward/backward; Nesterov update of the active candidates only."""
    net = state.supernet
    sampled = sample_paths(state.alpha, state.rng, "weight")
    active = {pos: [(idx[0], 1.0)] for pos, idx in sampled.items()}
    net.zero_grads()
    logits = net.forward(xb, active, mode="train")
    _, keys = net.grads_for(active)
    l2_params = {k: state.opt_w.params[k] for k in keys if not k.endswith((".G", ".Bt", ".At"))}
    loss, grad_logits = loss_weights(logits, yb, l2_params, state.lambda0)
    if not np.isfinite(loss):
        raise RuntimeError(f"NaN loss in weight stage at step {state.step}")
    net.backward(grad_logits)
    grads_now, keys = net.grads_for(active)
    if state.lambda0:
        for k, w in l2_params.items():
            grads_now[k] = grads_now[k] + 2.0 * state.lambda0 * w
    state.opt_w.step(grads_now, keys=keys)
    state.step += 1
    return loss


def arch_step(state: SearchState, xb: np.ndarray, yb: np.ndarray) -> float:
    """Two-path mixture loss; Adam(beta1=0) update of the sampled alpha entries."""
    net = state.supernet
    sampled = sample_paths(state.alpha, state.rng, "arch")
    active = {}
    for pos, idx in sampled.items():
        a = state.alpha[pos][list(idx)]
        pair_p = softmax1d(a)
        active[pos] = list(zip(idx, pair_p))
    net.zero_grads()
    logits = net.forward(xb, active, mode="train")
    loss, grad_logits = loss_weights(logits, yb, {}, 0.0)
    if not np.isfinite(loss):
        raise RuntimeError(f"NaN loss in arch stage at step {state.step}")
    grad_p = net.backward(grad_logits)

    for pos, idx in sampled.items():
        a_full = state.alpha[pos]
        gp = np.array([grad_p[pos][ci] for ci in idx])
        pair_p = np.array([p for _, p in active[pos]])
        # chain through the pairwise-renormalized softmax
        d_pair = pair_p * (gp - float(pair_p @ gp))
        grad_vec = np.zeros_like(a_full)
        for j, ci in enumerate(idx):
            grad_vec[ci] = d_pair[j]
        if state.lambda1:
            for ci in idx:
                grad_vec[ci] += 2.0 * state.lambda1 * a_full[ci]
        if state.lambda2:
            elat = expected_latency_grad(a_full, state.lats[pos])
            for ci in idx:
                grad_vec[ci] += state.lambda2 * elat[ci]
        mask = np.zeros_like(a_full)
        mask[list(idx)] = 1.0
        state.opt_a.step({f"alpha.{pos}": grad_vec}, mask={f"alpha.{pos}": mask})
    state.step += 1
    penalty = state.lambda2 * expected_latency(state.alpha, state.lats)
    return loss + penalty


@dataclass
class DerivedArchitecture:
    layers: list  # [{"name", "algo", "bits"}]
    expected_latency_ms: float
    param_count: int
    space: str
    lambda2: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "expected_latency_ms": self.expected_latency_ms,
            "param_count": self.param_count,
            "space": self.space,
            "lambda2": self.lambda2,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DerivedArchitecture":
        return cls(doc["layers"], doc["expected_latency_ms"], doc["param_count"],
                   doc["space"], doc["lambda2"], doc["seed"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DerivedArchitecture":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def derive_choices(supernet: SuperNet, alpha: dict) -> dict[int, int]:
    """Argmax per layer (lowest index wins ties); warns on near-ties."""
    choices = {}
    for pos in supernet.searchable_positions():
        p = softmax1d(alpha[pos])
        best = int(np.argmax(p))
        if len(p) > 1:
            gap = float(np.sort(p)[-1] - np.sort(p)[-2])
            if gap < DERIVATION_WARN_GAP:
                warnings.warn(
                    f"layer {pos}: top-2 probability gap {gap:.3f} below "
                    f"{DERIVATION_WARN_GAP}; derivation may be unstable"
                )
        choices[pos] = best
    return choices


def build_derived_model(macro: Model, supernet: SuperNet,
                        choices: dict[int, int], seed: int = 0) -> Model:
    """Fresh model implementing the derived choices, ready to be trained from scratch."""
    from .training.presets import build_preset

    meta = dict(macro.meta)
    preset = meta.pop("preset", None)
    if preset is None:
        raise ValueError("macro model lacks preset metadata")
    fresh = build_preset(
        preset, algo="direct", bits=meta.get("bits", 32), flex=False,
        in_ch=meta["in_ch"], num_classes=meta["num_classes"],
        width=meta["width"], size=meta["size"], seed=seed,
    ) if preset != "lenet-q" else build_preset(
        preset, algo="direct", bits=meta.get("bits", 32),
        num_classes=meta["num_classes"], size=meta["size"], seed=seed,
    )
    for pos, ci in choices.items():
        cand = supernet.candidates[pos][ci]
        old = fresh.layers[pos]
        rng = np.random.default_rng((seed, pos, 1))
        fresh.layers[pos] = _build_candidate(old, cand, rng)
    fresh.meta["derived"] = True
    fresh.validate()
    return fresh


@dataclass
class SearchResult:
    derived: DerivedArchitecture
    alpha: dict
    model: Model
    report: object | None = None  # TrainReport when final training ran


def search(macro: Model, space: str, table: LatencyTable, lambda2: float,
           schedule: SearchSchedule, dataset=None,
           final_schedule=None, base_bits: int | None = None) -> SearchResult:
    """Alternating two-stage search, derivation, and optional from-scratch training."""
    from .data_io import Dataset
    from .training.loop import train as train_model

    if dataset is None:
        raise ValueError("search needs a dataset")
    if isinstance(dataset, Dataset):
        train_ds, val_ds = dataset.split(schedule.val_fraction, schedule.seed)
    else:
        train_ds, val_ds = dataset
    arch_ds = val_ds if schedule.arch_on_val and len(val_ds) else train_ds

    state = make_search_state(macro, space, table, lambda2, schedule, base_bits)
    bs = schedule.batch_size
    arch_cursor = 0
    order_rng = np.random.default_rng((schedule.seed, 1))
    for epoch in range(schedule.epochs):
        lr = cosine_lr(schedule.w_lr, epoch, schedule.epochs)
        state.opt_w.lr = lr
        state.opt_a.lr = cosine_lr(schedule.a_lr, epoch, schedule.epochs)
        order = order_rng.permutation(len(train_ds))
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            weight_step(state, train_ds.images[idx], train_ds.labels[idx])
            a_idx = [(arch_cursor + j) % len(arch_ds) for j in range(bs)]
            arch_cursor = (arch_cursor + bs) % len(arch_ds)
            arch_step(state, arch_ds.images[a_idx], arch_ds.labels[a_idx])

    choices = derive_choices(state.supernet, state.alpha)
    model = build_derived_model(macro, state.supernet, choices, seed=schedule.seed)
    elat = 0.0
    layers_doc = []
    for pos, ci in choices.items():
        cand = state.supernet.candidates[pos][ci]
        layers_doc.append({"name": state.supernet.layers[pos].name,
                           "algo": cand.algo.name, "bits": cand.bits})
        elat += float(state.lats[pos][ci])
    derived = DerivedArchitecture(layers_doc, elat, model.param_count(),
                                  space, lambda2, schedule.seed)
    report = None
    if final_schedule is not None and final_schedule.epochs > 0:
        report = train_model(model, (train_ds, val_ds), final_schedule)
    return SearchResult(derived, state.alpha, model, report)
