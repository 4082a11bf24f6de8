import copy

import numpy as np
import pytest

from winoq.data_io import gen_synthetic
from winoq.numerics import Tensor4
from winoq.quantization import QSpec, StateError
from winoq.training import checkpoint
from winoq.training.layers import (
    BatchNorm,
    DirectConvLayer,
    FullyConnected,
    WaConvLayer,
    wa_backward,
    wa_forward,
)
from winoq.training.loop import (
    TrainSchedule,
    adapt,
    loss_weights,
    train,
    warmup,
)
from winoq.training.presets import micro_resnet, tiny_cnn, lenet_q
from winoq.transforms import make_transform
from winoq.winograd_conv import ConvAlgo


def fd_check(loss_fn, arr, analytic, entries, h=1e-5, tol=1e-5):
    """Central finite differences at a sample of entries; returns worst rel err."""
    worst = 0.0
    for idx in entries:
        old = arr[idx]
        arr[idx] = old + h
        lp = loss_fn()
        arr[idx] = old - h
        lm = loss_fn()
        arr[idx] = old
        fd = (lp - lm) / (2 * h)
        rel = abs(fd - analytic[idx]) / max(abs(fd), 1e-8)
        worst = max(worst, rel)
    assert worst <= tol, f"worst rel err {worst:.3e}"
    return worst


def sample_entries(shape, rng, k=6):
    total = int(np.prod(shape))
    picks = rng.choice(total, size=min(k, total), replace=False)
    return [np.unravel_index(p, shape) for p in picks]


class TestWaLayerGradients:
    @pytest.mark.parametrize("m,r", [(2, 3), (4, 3), (2, 5), (4, 5)])
    def test_all_parameter_classes(self, m, r, rng):
        tf = make_transform(m, r).to_float()
        layer = WaConvLayer("wa", 2, 2, tf, pad=r // 2, qspec=QSpec.float32(),
                            learnable_tf=True, rng=rng)
        x = rng.uniform(-1, 1, (1, 2, 8, 8))

        def loss():
            y = layer.forward(x, "train")
            return 0.5 * float((y * y).sum())

        y = layer.forward(x, "train")
        layer.zero_grads()
        dx = layer.backward(y.copy())
        for name in ("weights", "G", "Bt", "At"):
            arr = getattr(layer, name)
            fd_check(loss, arr, layer.grads[name], sample_entries(arr.shape, rng))
        fd_check(loss, x, dx, sample_entries(x.shape, rng))

    def test_receptive_field_locality(self, rng):
        tf = make_transform(2, 3).to_float()
        layer = WaConvLayer("wa", 1, 1, tf, pad=0, qspec=QSpec.float32(), rng=rng)
        x = rng.uniform(-1, 1, (1, 1, 8, 8))
        y = layer.forward(x, "train")
        layer.zero_grads()
        g = np.zeros_like(y)
        oi, oj = 2, 3
        g[0, 0, oi, oj] = 1.0
        dx = layer.backward(g)
        nz = np.argwhere(dx[0, 0] != 0)
        assert len(nz) > 0
        for i, j in nz:
            assert oi <= i <= oi + 2 and oj <= j <= oj + 2

    def test_frozen_transforms_zero_grads(self, rng):
        tf = make_transform(2, 3).to_float()
        layer = WaConvLayer("wa", 1, 2, tf, pad=1, qspec=QSpec.float32(),
                            learnable_tf=False, rng=rng)
        x = Tensor4(rng.uniform(-1, 1, (1, 1, 6, 6)))
        y, ctx = wa_forward(layer, x, "train")
        grads = wa_backward(layer, ctx, y)
        assert np.array_equal(grads["d_G"], np.zeros_like(layer.G))
        assert np.array_equal(grads["d_Bt"], np.zeros_like(layer.Bt))
        assert np.array_equal(grads["d_At"], np.zeros_like(layer.At))
        assert grads["d_weights"].shape == layer.weights.shape

    def test_stale_ctx_raises(self, rng):
        tf = make_transform(2, 3).to_float()
        layer = WaConvLayer("wa", 1, 1, tf, qspec=QSpec.float32(), rng=rng)
        x = Tensor4(rng.uniform(-1, 1, (1, 1, 6, 6)))
        y, ctx = wa_forward(layer, x, "eval")
        with pytest.raises(StateError):
            wa_backward(layer, ctx, y)

    def test_float32_mode_equals_inference_conv(self, rng):
        from winoq.winograd_conv import ConvShape, conv2d_winograd

        tf = make_transform(4, 3).to_float()
        layer = WaConvLayer("wa", 3, 2, tf, pad=1, qspec=QSpec.float32(), rng=rng)
        x = Tensor4(rng.uniform(-1, 1, (2, 3, 9, 9)))
        y, _ = wa_forward(layer, x, "eval")
        ref = conv2d_winograd(x, Tensor4(layer.weights), tf,
                              ConvShape(3, 2, 9, 9, 3, 1, 1))
        assert np.array_equal(y.data, ref.data)

    def test_int8_output_on_grid(self, rng):
        tf = make_transform(2, 3).to_float()
        layer = WaConvLayer("wa", 2, 2, tf, pad=1, qspec=QSpec(8), rng=rng)
        x = rng.uniform(-1, 1, (1, 2, 8, 8))
        y = layer.forward(x, "train")
        qp = layer.qnodes["output"].observer.running_max_abs / 127
        ratio = y / qp
        np.testing.assert_allclose(ratio, np.round(ratio), atol=1e-9)

    def test_warmup_leaves_parameters_bitwise(self, rng):
        tf = make_transform(2, 3).to_float()
        layer = WaConvLayer("wa", 2, 2, tf, pad=1, qspec=QSpec(8),
                            learnable_tf=True, rng=rng)
        before = {k: v.copy() for k, v in layer.params().items()}
        layer.forward(rng.uniform(-1, 1, (2, 2, 8, 8)), "warmup")
        for k, v in layer.params().items():
            assert np.array_equal(v, before[k])


class TestOtherLayerGradients:
    def test_direct_conv(self, rng):
        layer = DirectConvLayer("c", 2, 3, k=3, stride=1, pad=1,
                                qspec=QSpec.float32(), rng=rng)
        x = rng.uniform(-1, 1, (2, 2, 6, 6))

        def loss():
            y = layer.forward(x, "train")
            return 0.5 * float((y * y).sum())

        y = layer.forward(x, "train")
        layer.zero_grads()
        dx = layer.backward(y.copy())
        fd_check(loss, layer.weights, layer.grads["weights"],
                 sample_entries(layer.weights.shape, rng))
        fd_check(loss, x, dx, sample_entries(x.shape, rng))

    def test_batchnorm(self, rng):
        layer = BatchNorm("bn", 3)
        x = rng.uniform(-1, 1, (4, 3, 5, 5))

        def loss():
            y = layer.forward(x, "train")
            return float((y * np.sin(np.arange(y.size).reshape(y.shape))).sum())

        y = layer.forward(x, "train")
        layer.zero_grads()
        g = np.sin(np.arange(y.size).reshape(y.shape))
        dx = layer.backward(g)
        fd_check(loss, layer.gamma, layer.grads["gamma"], [(0,), (1,), (2,)], tol=2e-5)
        fd_check(loss, layer.beta, layer.grads["beta"], [(0,), (1,), (2,)], tol=2e-5)
        fd_check(loss, x, dx, sample_entries(x.shape, rng), tol=2e-5)

    def test_fully_connected(self, rng):
        layer = FullyConnected("fc", 6, 4, qspec=QSpec.float32(), rng=rng)
        x = rng.uniform(-1, 1, (3, 6))

        def loss():
            y = layer.forward(x, "train")
            return 0.5 * float((y * y).sum())

        y = layer.forward(x, "train")
        layer.zero_grads()
        dx = layer.backward(y.copy())
        fd_check(loss, layer.weights, layer.grads["weights"],
                 sample_entries(layer.weights.shape, rng))
        fd_check(loss, layer.bias, layer.grads["bias"], [(0,), (3,)])
        fd_check(loss, x, dx, sample_entries(x.shape, rng))


class TestLoss:
    def test_uniform_logits_ln_k(self):
        logits = np.zeros((5, 7))
        loss, _ = loss_weights(logits, np.arange(5) % 7, {}, 0.0)
        assert loss == pytest.approx(np.log(7))

    def test_lambda0_zero_is_pure_ce(self, rng):
        logits = rng.uniform(-1, 1, (4, 3))
        labels = np.array([0, 1, 2, 0])
        l0, _ = loss_weights(logits, labels, {"w": np.ones(5)}, 0.0)
        l1, _ = loss_weights(logits, labels, {}, 0.0)
        assert l0 == l1

    def test_l2_term_value(self):
        logits = np.zeros((2, 2))
        w = {"w": np.array([1.0, 2.0])}
        loss, _ = loss_weights(logits, np.array([0, 1]), w, 0.1)
        assert loss == pytest.approx(np.log(2) + 0.1 * 5.0)

    def test_grad_logits_analytic(self, rng):
        logits = rng.uniform(-2, 2, (3, 4))
        labels = np.array([1, 0, 3])
        _, grad = loss_weights(logits, labels, {}, 0.0)
        h = 1e-6
        for i in range(3):
            for j in range(4):
                lp = loss_weights(logits + h * _one_hot(logits.shape, i, j),
                                  labels, {}, 0.0)[0]
                lm = loss_weights(logits - h * _one_hot(logits.shape, i, j),
                                  labels, {}, 0.0)[0]
                fd = (lp - lm) / (2 * h)
                assert abs(fd - grad[i, j]) <= 1e-6


def _one_hot(shape, i, j):
    e = np.zeros(shape)
    e[i, j] = 1.0
    return e


class TestTrainLoop:
    def test_sanity_baseline(self, synth_split):
        tr, va = synth_split
        model = tiny_cnn(algo="direct", bits=32, seed=0)
        report = train(model, (tr, va), TrainSchedule(epochs=10, lr=2e-3, seed=0))
        assert report.final_val_acc >= 0.95

    def test_zero_epochs_bitwise_unchanged(self, synth_split):
        model = micro_resnet(algo="direct", bits=32, seed=0)
        before = {k: v.copy() for k, v in model.parameters().items()}
        report = train(model, synth_split, TrainSchedule(epochs=0, seed=0))
        assert report.epochs == []
        for k, v in model.parameters().items():
            assert np.array_equal(v, before[k])

    def test_determinism_bitwise(self, synth_split):
        runs = []
        for _ in range(2):
            model = tiny_cnn(algo="wa-f2", bits=8, seed=3)
            runs.append(train(model, synth_split,
                              TrainSchedule(epochs=2, lr=2e-3, seed=3)))
        assert runs[0].epochs == runs[1].epochs

    def test_frozen_transforms_never_mutate(self, synth_split):
        model = tiny_cnn(algo="wa-f4", bits=8, flex=False, seed=1)
        tfs = {
            i: (l.G.copy(), l.Bt.copy(), l.At.copy())
            for i, l in enumerate(model.layers) if isinstance(l, WaConvLayer)
        }
        train(model, synth_split, TrainSchedule(epochs=1, lr=2e-3, seed=1))
        for i, (G, Bt, At) in tfs.items():
            layer = model.layers[i]
            assert np.array_equal(layer.G, G)
            assert np.array_equal(layer.Bt, Bt)
            assert np.array_equal(layer.At, At)

    def test_flex_transforms_do_move(self, synth_split):
        model = tiny_cnn(algo="wa-f4", bits=8, flex=True, seed=1)
        wa = next(l for l in model.layers if isinstance(l, WaConvLayer))
        G0 = wa.G.copy()
        train(model, synth_split, TrainSchedule(epochs=1, lr=2e-3, seed=1))
        assert not np.array_equal(wa.G, G0)

    def test_warmup_pass_only_touches_buffers(self, synth_split):
        tr, _ = synth_split
        model = micro_resnet(algo="wa-f2", bits=8, seed=2)
        before = {k: v.copy() for k, v in model.parameters().items()}
        warmup(model, tr)
        for k, v in model.parameters().items():
            assert np.array_equal(v, before[k])

    def test_equivalence_at_init_float32(self, synth_split):
        tr, va = synth_split
        direct = micro_resnet(algo="direct", bits=32, seed=5)
        res = adapt(direct, ConvAlgo("winograd", 4), False, 0, dataset=synth_split)
        x = va.images[:8]
        a = direct.forward(x, mode="eval")
        b = res.model.forward(x, mode="eval")
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_nan_abort_diagnostic(self, synth_split):
        model = tiny_cnn(algo="direct", bits=32, seed=0)
        from winoq.training.loop import TrainAbort

        model.layers[0].weights[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainAbort, match="step 0"):
            train(model, synth_split, TrainSchedule(epochs=1, lr=1e-3, seed=0))


class TestAdapt:
    def test_epochs_zero_weights_bitwise_equal(self, synth_split):
        direct = micro_resnet(algo="direct", bits=8, seed=4)
        warmup(direct, synth_split[0])
        res = adapt(direct, ConvAlgo("winograd", 2), False, 0, dataset=synth_split)
        for la, lb in zip(direct.layers, res.model.layers):
            if hasattr(la, "weights"):
                assert np.array_equal(la.weights, lb.weights)

    def test_kernel_size_policy(self, synth_split):
        direct = micro_resnet(algo="direct", bits=32, seed=4)
        res = adapt(direct, ConvAlgo("winograd", 6), False, 0, dataset=synth_split)
        ms = {l.name: l.m for l in res.model.layers if isinstance(l, WaConvLayer)}
        assert ms["b1c1"] == 6
        assert ms["b3c1"] == 2 and ms["b3c2"] == 2  # last block pinned to F2
        stem = next(l for l in res.model.layers if l.name == "stem")
        assert isinstance(stem, DirectConvLayer)  # input layer stays lowered

    def test_needs_winograd_target(self, synth_split):
        direct = micro_resnet(algo="direct", bits=32, seed=4)
        with pytest.raises(ValueError):
            adapt(direct, ConvAlgo("im2row"), False, 0, dataset=synth_split)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, synth_split, rng):
        model = micro_resnet(algo="wa-f4", bits=8, flex=True, seed=6)
        train(model, synth_split, TrainSchedule(epochs=1, lr=2e-3, seed=6))
        checkpoint.save_checkpoint(model, tmp_path / "ck")
        back = checkpoint.load_checkpoint(tmp_path / "ck")
        pa, pb = model.parameters(), back.parameters()
        assert set(pa) == set(pb)
        for k in pa:
            assert np.array_equal(pa[k], pb[k]), k
        x = synth_split[1].images[:4]
        np.testing.assert_array_equal(model.forward(x, mode="eval"),
                                      back.forward(x, mode="eval"))

    def test_lenet_preset_builds_and_checkpoints(self, tmp_path, rng):
        model = lenet_q(algo="wa-f2", bits=8, seed=0)
        ds = gen_synthetic(10, 8, 28, seed=1)
        train(model, ds, TrainSchedule(epochs=1, lr=1e-3, seed=0, val_fraction=0.2))
        checkpoint.save_checkpoint(model, tmp_path / "ck")
        back = checkpoint.load_checkpoint(tmp_path / "ck")
        x = ds.images[:4]
        np.testing.assert_array_equal(model.forward(x, mode="eval"),
                                      back.forward(x, mode="eval"))
