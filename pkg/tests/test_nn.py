import math

import numpy as np
import pytest

from lnskit.datapath import MacConfig
from lnskit.errors import ConfigError, ModelError, UsageError
from lnskit.format import Granularity, LnsFormat, QuantizerConfig, Role, fake_quantize, quantize_tensor
from lnskit.nn import (
    ACTIVATIONS, Network, QuantConfigs, backward, forward, im2col, loss_softmax_xent, softmax,
)

F8 = LnsFormat(8, 8)


def lns_cfgs(conversion="real", acc_bits=24):
    return QuantConfigs(
        QuantizerConfig(Role.QW, F8, granularity=Granularity.PER_CHANNEL, conversion=conversion),
        QuantizerConfig(Role.QA, F8, conversion=conversion),
        QuantizerConfig(Role.QE, F8),
        QuantizerConfig(Role.QG, F8),
        MacConfig(F8, accumulator_bits=acc_bits),
    )


def _loss(net, x, y):
    return loss_softmax_xent(forward(net, x, QuantConfigs()).logits, y)[0]


def finite_difference_check(net, x, y, h=1e-5):
    res = forward(net, x, QuantConfigs())
    _, g = loss_softmax_xent(res.logits, y)
    grads = backward(net, g, res.caches, QuantConfigs()).grad_w
    worst = 0.0
    for l, w in enumerate(net.weights):
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            up = _loss(net, x, y)
            w[idx] = old - h
            down = _loss(net, x, y)
            w[idx] = old
            num[idx] = (up - down) / (2 * h)
        rel = np.abs(grads[l] - num) / np.maximum(np.abs(grads[l]) + np.abs(num), 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


class TestActivations:
    @pytest.mark.parametrize("name", ["relu", "gelu", "identity"])
    def test_gradients_match_differences(self, name):
        f, df = ACTIVATIONS[name]
        z = np.linspace(-3, 3, 61) + 0.013  # avoid the relu kink
        num = (f(z + 1e-6) - f(z - 1e-6)) / 2e-6
        np.testing.assert_allclose(df(z), num, atol=1e-7)


class TestLoss:
    def test_uniform_logits(self):
        loss, _ = loss_softmax_xent(np.zeros((3, 7)), np.array([0, 3, 6]))
        assert loss == pytest.approx(math.log(7))

    def test_confident_correct(self):
        logits = np.array([[1000.0, 0.0, 0.0]])
        loss, g = loss_softmax_xent(logits, np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5))
        y = rng.integers(0, 5, 4)
        _, g = loss_softmax_xent(logits, y)
        num = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            e = np.zeros_like(logits)
            e[idx] = 1e-6
            num[idx] = (loss_softmax_xent(logits + e, y)[0] - loss_softmax_xent(logits - e, y)[0]) / 2e-6
        np.testing.assert_allclose(g, num, atol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        p = softmax(np.random.default_rng(1).normal(size=(6, 4)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_bad_labels(self):
        with pytest.raises(ModelError):
            loss_softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


class TestNetwork:
    def test_init_shapes(self):
        net = Network.init([5, 7, 3], np.random.default_rng(0))
        assert [w.shape for w in net.weights] == [(7, 5), (3, 7)]
        assert net.sizes == [5, 7, 3] and net.n_params() == 56

    def test_shape_mismatch(self):
        with pytest.raises(ModelError):
            Network([np.zeros((4, 3)), np.zeros((2, 5))])

    def test_unknown_activation(self):
        with pytest.raises(ModelError):
            Network([np.zeros((2, 2))], "tanh")

    def test_bad_input_width(self):
        net = Network.init([5, 3], np.random.default_rng(0))
        with pytest.raises(ModelError):
            forward(net, np.zeros((2, 4)), QuantConfigs())


class TestForward:
    def test_no_quantizers_is_plain_float(self):
        rng = np.random.default_rng(2)
        net = Network.init([6, 8, 3], rng)
        x = rng.normal(size=(5, 6))
        ref = np.maximum(x @ net.weights[0].T, 0) @ net.weights[1].T
        np.testing.assert_array_equal(forward(net, x, QuantConfigs()).logits, ref)

    def test_single_layer_composition(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 3))
        net = Network([np.eye(3) * 0.7], "identity")
        cfgs = lns_cfgs()
        out = forward(net, x, cfgs).logits
        expect = fake_quantize(x, cfgs.activation) @ fake_quantize(net.weights[0], cfgs.weight).T
        np.testing.assert_array_equal(out, expect)

    def test_hidden_activations_are_quantized(self):
        rng = np.random.default_rng(4)
        net = Network.init([5, 6, 2], rng)
        x = rng.normal(size=(3, 5))
        cfgs = lns_cfgs()
        res = forward(net, x, cfgs)
        h = res.caches[1].x_q
        np.testing.assert_array_equal(h, fake_quantize(h, cfgs.activation))

    @pytest.mark.parametrize("conv", ["exact", "hybrid:3"])
    def test_exact_datapath_matches_real_path(self, conv):
        rng = np.random.default_rng(5)
        net = Network([rng.normal(size=(4, 32))], "identity")
        x = rng.normal(size=(6, 32))
        real = forward(net, x, lns_cfgs("real")).logits
        res = forward(net, x, lns_cfgs(conv, acc_bits=32))
        sx = np.abs(x).max()
        sw = np.abs(net.weights[0]).max(axis=1)
        pre = res.logits / (sx * sw[None, :])
        pre_real = real / (sx * sw[None, :])
        np.testing.assert_allclose(pre, pre_real, atol=32 * 2.0**-23, rtol=0)
        assert res.saturated == 0

    def test_datapath_counts_saturation(self):
        net = Network([np.ones((1, 32))], "identity")
        res = forward(net, np.ones((2, 32)), lns_cfgs("exact", acc_bits=24))
        assert res.saturated == 2

    def test_datapath_needs_activation_quantizer(self):
        cfgs = lns_cfgs("exact")
        cfgs.activation = QuantizerConfig()
        net = Network([np.ones((1, 4))], "identity")
        with pytest.raises(ConfigError):
            forward(net, np.ones((1, 4)), cfgs)

    def test_datapath_rejects_per_feature_weights(self):
        cfgs = lns_cfgs("exact")
        cfgs.weight = QuantizerConfig(Role.QW, F8, granularity="per-feature", conversion="exact")
        net = Network([np.ones((2, 4))], "identity")
        with pytest.raises(ConfigError):
            forward(net, np.ones((1, 4)), cfgs)

    def test_prequantized_weights(self):
        rng = np.random.default_rng(6)
        net = Network.init([4, 3], rng)
        wq = [quantize_tensor(net.weights[0], QuantizerConfig(Role.QW, LnsFormat(8, 2)))]
        out = forward(net, np.eye(4), QuantConfigs(), weights_q=wq).logits
        np.testing.assert_array_equal(out, wq[0].decode().T)


class TestBackward:
    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        net = Network.init([6, 10, 4], rng, "gelu")
        x = rng.normal(size=(8, 6))
        y = rng.integers(0, 4, 8)
        assert finite_difference_check(net, x, y) <= 1e-5

    def test_finite_differences_relu(self):
        rng = np.random.default_rng(8)
        net = Network.init([5, 12, 3], rng, "relu")
        x = rng.normal(size=(10, 5))
        y = rng.integers(0, 3, 10)
        assert finite_difference_check(net, x, y) <= 1e-5

    def test_quantized_gradients_are_logquant_of_upstream(self):
        rng = np.random.default_rng(9)
        net = Network.init([5, 6, 3], rng)
        x = rng.normal(size=(4, 5))
        cfgs = lns_cfgs()
        res = forward(net, x, cfgs)
        _, g = loss_softmax_xent(res.logits, rng.integers(0, 3, 4))
        bundle = backward(net, g, res.caches, cfgs)
        # logits gradient: QE of the loss gradient
        np.testing.assert_array_equal(bundle.grad_x[1], fake_quantize(g, cfgs.error))
        # last weight gradient: QG of the quantized error times the cached input
        expect = fake_quantize(bundle.grad_x[1].T @ res.caches[1].x_q, cfgs.gradient)
        np.testing.assert_array_equal(bundle.grad_w[1], expect)
        # hidden error: QE applied to the straight-through product with the quantized weight
        upstream = bundle.grad_x[1] @ res.caches[1].w_q
        np.testing.assert_array_equal(bundle.grad_x[0], fake_quantize(upstream, cfgs.error))

    def test_zero_upstream(self):
        rng = np.random.default_rng(10)
        net = Network.init([3, 4, 2], rng)
        res = forward(net, rng.normal(size=(2, 3)), lns_cfgs())
        assert backward(net, np.zeros((2, 2)), res.caches, lns_cfgs()).is_zero

    def test_missing_cache(self):
        net = Network.init([3, 2], np.random.default_rng(0))
        with pytest.raises(UsageError):
            backward(net, np.zeros((1, 2)), [], QuantConfigs())


class TestIm2col:
    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 2))
        cols = im2col(x, 3, 2, stride=1)
        out = (cols @ w.reshape(4, -1).T).reshape(2, 4, 4, 4).transpose(0, 3, 1, 2)
        ref = np.zeros((2, 4, 4, 4))
        for n in range(2):
            for o in range(4):
                for i in range(4):
                    for j in range(4):
                        ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 2] * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_stride(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        cols = im2col(x, 2, 2, stride=2)
        np.testing.assert_array_equal(cols, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])
