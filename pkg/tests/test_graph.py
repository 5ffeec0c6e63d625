import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from golden import GOLDEN_OUT, GOLDEN_X, golden_model
from oracles import conv2d_nested
from qkit.graph import (Layer, LayerKind, MissingCalibrationError, Model, QuantConfig, ShapeError, bn_coefficients,
                        clipped_gelu, fold_batch_norm, forward_fp32, forward_int8, gelu, quantize_weights,
                        replace_gelu, run, swish)
from qkit.quant import fake_quantize, max_scale_params, quantize, scale_params


def linear(name, w, b=None):
    tensors = {"weight": f"{name}.weight"}
    weights = {f"{name}.weight": np.asarray(w, dtype=np.float32)}
    if b is not None:
        tensors["bias"] = f"{name}.bias"
        weights[f"{name}.bias"] = np.asarray(b, dtype=np.float32)
    return Layer(LayerKind.LINEAR, name, tensors), weights


def chain(*parts, input_shape):
    layers, weights = [], {}
    for p in parts:
        if isinstance(p, tuple):
            layers.append(p[0])
            weights.update(p[1])
        else:
            layers.append(p)
    return Model(tuple(layers), weights, input_shape)


def calibrate_max_all(model, x):
    """Per-channel max weights, per-tensor max activations (from an fp32 pass)."""
    acts = {}
    run(model, x, observer=lambda layer, v: acts.__setitem__(layer.name, float(np.abs(v).max())))
    model = quantize_weights(model)
    return model.map_layers(lambda l: l.with_quant(enabled=True, activation_params=scale_params(acts[l.name], 8))
                            if l.quantizable else l)


def bn_layer(name, gamma, beta, mean, var, eps=1e-5):
    t = {r: f"{name}.{r}" for r in ("gamma", "beta", "mean", "var")}
    w = {f"{name}.{r}": np.asarray(v, dtype=np.float32) for r, v in
         (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var))}
    return Layer(LayerKind.BATCHNORM, name, t, {"eps": eps}), w


class TestFp32:
    def test_identity_linear(self):
        m = chain(linear("fc", np.eye(3), np.zeros(3)), input_shape=(3,))
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(forward_fp32(m, x), x)

    def test_relu(self):
        m = chain(Layer(LayerKind.RELU, "r"), input_shape=(2,))
        np.testing.assert_array_equal(forward_fp32(m, [[-1.0, 2.0]]), [[0.0, 2.0]])

    def test_golden_mlp(self):
        np.testing.assert_allclose(forward_fp32(golden_model(), GOLDEN_X), GOLDEN_OUT, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward_fp32(golden_model(), np.zeros((1, 4)))

    def test_conv_flatten_chain(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
        m = Model((Layer(LayerKind.CONV2D, "c", {"weight": "c.w"}, {"padding": 1}), Layer(LayerKind.FLATTEN, "f")),
                  {"c.w": w}, (1, 4, 4))
        x = rng.normal(size=(2, 1, 4, 4))
        np.testing.assert_allclose(forward_fp32(m, x), conv2d_nested(x, w, 1, 1).reshape(2, -1), atol=1e-9)

    def test_softmax_rows_sum_to_one(self):
        m = chain(Layer(LayerKind.SOFTMAX, "sm"), input_shape=(4,))
        out = forward_fp32(m, np.random.default_rng(0).normal(size=(3, 4)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_missing_weight_name(self):
        with pytest.raises(KeyError):
            Model((Layer(LayerKind.LINEAR, "fc", {"weight": "nope"}),), {}, (2,))

    def test_non_quantizable_cannot_enable(self):
        with pytest.raises(ValueError):
            Layer(LayerKind.RELU, "r", quant=QuantConfig(enabled=True))


class TestInt8:
    def test_all_disabled_is_fp32(self):
        m = golden_model()
        x = np.random.default_rng(0).normal(size=(10, 3))
        cal = calibrate_max_all(m, x).with_enabled([])
        np.testing.assert_array_equal(forward_int8(cal, x), forward_fp32(m, x))

    def test_grid_inputs_single_linear(self):
        # unit scales: integer weights with column max 127 and integer inputs with range 127
        w = np.array([[127.0, -3.0], [2.0, 127.0]])
        m = chain(linear("fc", w, [0.1, 0.2]), input_shape=(2,))
        x = np.array([[1.0, -5.0], [3.0, 2.0]])
        q = m.map_layers(lambda l: l.with_quant(enabled=True, activation_params=scale_params(127.0, 8),
                                                weight_params=max_scale_params(w, 8, 1)))
        np.testing.assert_allclose(forward_int8(q, x), forward_fp32(m, x), atol=1e-6)

    def test_matches_fake_quant_oracle(self):
        rng = np.random.default_rng(3)
        w1, b1 = rng.normal(size=(5, 8)), rng.normal(size=8)
        w2, b2 = rng.normal(size=(8, 3)), rng.normal(size=3)
        m = chain(linear("fc1", w1, b1), Layer(LayerKind.RELU, "r"), linear("fc2", w2, b2), input_shape=(5,))
        x = rng.normal(size=(16, 5))
        q = calibrate_max_all(m, x)
        l1, l2 = q.layer("fc1").quant, q.layer("fc2").quant
        w1f, w2f = q.weights["fc1.weight"].astype(np.float64), q.weights["fc2.weight"].astype(np.float64)
        h = fake_quantize(x, l1.activation_params) @ fake_quantize(w1f, l1.weight_params) + q.weights["fc1.bias"]
        h = np.maximum(h, 0)
        ref = fake_quantize(h, l2.activation_params) @ fake_quantize(w2f, l2.weight_params) + q.weights["fc2.bias"]
        out = forward_int8(q, x)
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)

    def test_missing_calibration_names_tensor(self):
        m = golden_model().map_layers(lambda l: l.with_quant(enabled=True) if l.quantizable else l)
        m = quantize_weights(m)
        with pytest.raises(MissingCalibrationError, match="fc1.input"):
            forward_int8(m, np.zeros((1, 3)))

    def test_quantized_conv_layer(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 2, 3, 3))
        m = Model((Layer(LayerKind.CONV2D, "c", {"weight": "c.w"}, {"stride": 2}),), {"c.w": w}, (2, 7, 7))
        x = rng.normal(size=(2, 2, 7, 7))
        q = calibrate_max_all(m, x)
        c = q.layer("c").quant
        ref = conv2d_nested(fake_quantize(x, c.activation_params),
                            fake_quantize(q.weights["c.w"].astype(np.float64), c.weight_params), 2)
        np.testing.assert_allclose(forward_int8(q, x), ref, rtol=1e-10, atol=1e-10)


class TestActivations:
    def test_zero(self):
        assert gelu(0.0) == 0.0 and swish(0.0) == 0.0

    def test_minima(self):
        x = np.linspace(-4, 0, 400_001)
        assert gelu(x).min() == pytest.approx(-0.1700, abs=1e-3)
        assert swish(x).min() == pytest.approx(-0.2785, abs=1e-3)

    def test_gelu_saturates(self):
        assert abs(gelu(10.0) - 10.0) < 1e-6

    def test_gelu_matches_math_erf(self):
        for v in np.linspace(-8, 8, 161):
            assert abs(gelu(v) - 0.5 * v * (1 + math.erf(v / math.sqrt(2)))) <= 1e-7 * max(1.0, abs(v))

    def test_clipped_codes(self):
        gmin = gelu(np.linspace(-3, 0, 30001)).min()
        assert quantize(gmin, scale_params(10.0, 8)).data == -2
        assert quantize(gmin, scale_params(50.0, 8)).data == 0

    def test_clip_inactive_for_negative(self):
        x = np.linspace(-5, 0, 51)
        np.testing.assert_array_equal(clipped_gelu(x, 10.0), gelu(x))

    def test_clipped_limit_must_be_positive(self):
        with pytest.raises(ValueError):
            clipped_gelu(1.0, 0.0)

    @given(st.floats(1.0, 50.0), st.floats(0.0, 10.0))
    def test_monotone_above_one(self, x, dx):
        assert gelu(x + dx) >= gelu(x) and swish(x + dx) >= swish(x)

    @given(st.floats(-20, 200), st.floats(0.5, 20))
    def test_clipped_range(self, x, limit):
        y = clipped_gelu(x, limit)
        assert -0.1701 <= y <= limit

    def test_replace_gelu(self):
        m = golden_model()
        r = replace_gelu(m, 10.0)
        assert r.layer("act").kind is LayerKind.CLIPPED_GELU and r.layer("act").attrs["limit"] == 10.0


class TestFoldBatchNorm:
    def test_identity_bn(self):
        eps = 1e-5
        fc = linear("fc", [[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5])
        m = chain(fc, bn_layer("bn", [1, 1], [0, 0], [0, 0], [1 - eps, 1 - eps], eps), input_shape=(2,))
        f = fold_batch_norm(m)
        assert [l.name for l in f.layers] == ["fc"]
        np.testing.assert_allclose(f.weights["fc.weight"], m.weights["fc.weight"], rtol=1e-7)
        np.testing.assert_allclose(f.weights["fc.bias"], m.weights["fc.bias"], rtol=1e-7)

    def test_hand_example(self):
        c, d = bn_coefficients([2.0], [1.0], [3.0], [4.0], 0.0)
        assert (c[0], d[0]) == (1.0, -2.0)
        fc = linear("fc", [[1.5], [-2.0]], [0.25])
        m = chain(fc, bn_layer("bn", [2.0], [1.0], [3.0], [4.0], 0.0), input_shape=(2,))
        f = fold_batch_norm(m)
        np.testing.assert_array_equal(f.weights["fc.weight"], m.weights["fc.weight"])
        np.testing.assert_array_equal(f.weights["fc.bias"], [0.25 - 2.0])

    def test_creates_missing_bias(self):
        m = chain(linear("fc", [[1.0]]), bn_layer("bn", [2.0], [1.0], [0.0], [4.0], 0.0), input_shape=(1,))
        f = fold_batch_norm(m)
        np.testing.assert_array_equal(f.weights["fc.bias"], [1.0])

    def test_random_conv_bn(self):
        rng = np.random.default_rng(9)
        w = rng.normal(size=(4, 3, 3, 3))
        conv = Layer(LayerKind.CONV2D, "conv", {"weight": "conv.w", "bias": "conv.b"}, {"padding": 1})
        bn, bnw = bn_layer("bn", rng.uniform(0.5, 2, 4), rng.normal(size=4), rng.normal(size=4),
                           rng.uniform(0.1, 3, 4))
        m = Model((conv, bn), {"conv.w": w, "conv.b": rng.normal(size=4), **bnw}, (3, 6, 6))
        x = rng.normal(size=(3, 3, 6, 6))
        np.testing.assert_allclose(forward_fp32(fold_batch_norm(m), x), forward_fp32(m, x), atol=1e-5)

    def test_requires_preceding_layer(self):
        bn, bnw = bn_layer("bn", [1.0], [0.0], [0.0], [1.0])
        m = Model((Layer(LayerKind.RELU, "r"), bn), bnw, (1,))
        with pytest.raises(ValueError):
            fold_batch_norm(m)

    def test_invalid_variance(self):
        with pytest.raises(ValueError):
            bn_coefficients([1.0], [0.0], [0.0], [-1.0], 1e-5)

    def test_per_channel_scales_track_fold_factors(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(6, 3))
        gamma = np.array([0.01, 1.0, 100.0])
        m = chain(linear("fc", w, np.zeros(3)), bn_layer("bn", gamma, [0, 0, 0], [0, 0, 0], [1, 1, 1], 0.0),
                  input_shape=(6,))
        f = fold_batch_norm(m)
        c, _ = bn_coefficients(gamma, [0, 0, 0], [0, 0, 0], [1, 1, 1], 0.0)
        w32 = m.weights["fc.weight"].astype(np.float64)
        wf = f.weights["fc.weight"].astype(np.float64)
        s_unfolded = max_scale_params(w32, 8, 1).scale
        s_folded = max_scale_params(wf, 8, 1).scale
        np.testing.assert_allclose(s_unfolded / s_folded, c, rtol=1e-6)
        np.testing.assert_allclose(fake_quantize(wf, max_scale_params(wf, 8, 1)),
                                   c * fake_quantize(w32, max_scale_params(w32, 8, 1)), rtol=1e-6)
