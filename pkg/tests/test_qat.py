import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qkit import autodiff as ad
from qkit.formats import Dataset
from qkit.graph import Layer, LayerKind, Model, quantize_weights, run
from qkit.qat import (LearnableRange, NarrowMinimumLoss, TrainConfig, TrainingDivergedError, cosine_lr,
                      fake_quant_forward_backward, grad_check, loss_and_grads, narrow_minimum_experiment,
                      pact_range_backward, train)
from qkit.quant import RangeSpec, affine_params, fake_quantize, scale_params
from qkit.toy import build_mlp, make_toy
from qkit.workflow import apply_calibration, evaluate, run_ptq


def max_calibrated(model, x, shrink=1.0):
    acts = {}
    run(model, x, observer=lambda l, v: acts.__setitem__(l.name, float(np.abs(v).max())))
    return quantize_weights(model).map_layers(
        lambda l: l.with_quant(enabled=True, activation_params=scale_params(shrink * acts[l.name], 8))
        if l.quantizable else l)


def local_grad(x, params):
    t = ad.Tensor(x, requires_grad=True)
    out = fake_quant_forward_backward(t, params)
    out.backward(np.ones_like(out.value))
    return t.grad


class TestSte:
    def test_inside_passes(self):
        assert local_grad(0.3, scale_params(1.0, 8)) == 1.0

    def test_above_blocks(self):
        assert local_grad(2.0, scale_params(1.0, 8)) == 0.0

    def test_forward_is_fake_quantize(self):
        x = np.linspace(-2, 2, 41)
        p = scale_params(1.5, 4)
        t = fake_quant_forward_backward(ad.Tensor(x), p)
        np.testing.assert_array_equal(t.value, fake_quantize(x, p))

    @given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-10, 10)),
           st.floats(-5, 0), st.floats(0.01, 5), st.booleans())
    def test_mask_is_range_membership(self, x, beta, width, affine):
        p = affine_params(RangeSpec(beta, beta + width), 8) if affine else scale_params(width, 8)
        lo, hi = p.real_bounds()
        np.testing.assert_array_equal(local_grad(x, p), ((x >= lo) & (x <= hi)).astype(float))

    def test_fully_clipped_path_has_zero_grads(self):
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(3, 4))
        layers = (Layer(LayerKind.LINEAR, "fc1", {"weight": "w1", "bias": "b1"}), Layer(LayerKind.RELU, "r"),
                  Layer(LayerKind.LINEAR, "fc2", {"weight": "w2", "bias": "b2"}))
        m = Model(layers, {"w1": w1, "b1": np.full(4, 100.0), "w2": rng.normal(size=(4, 2)), "b2": np.zeros(2)},
                  (3,))
        m = quantize_weights(m).map_layers(
            lambda l: l.with_quant(enabled=True, activation_params=scale_params(1.0, 8)) if l.name == "fc2" else l)
        x = rng.normal(size=(8, 3))
        _, grads = loss_and_grads(m, x, rng.integers(0, 2, 8))
        assert not grads["w1"].any() and not grads["b1"].any()
        assert grads["b2"].any()


class TestPact:
    def alpha_grad(self, x, alpha, upstream):
        t = ad.Tensor(np.asarray(x, dtype=np.float64))
        t.grad = np.asarray(upstream, dtype=np.float64)
        rng = LearnableRange(alpha)
        g = pact_range_backward(t, rng)
        assert rng.grad == g
        return g

    def test_inside_is_zero(self):
        assert self.alpha_grad([0.1, -0.5, 0.9], 1.0, [1.0, 2.0, 3.0]) == 0.0

    def test_single_clipped(self):
        assert self.alpha_grad([5.0], 1.0, [0.7]) == 0.7

    @pytest.mark.parametrize("upstream", [[1.0, 1.0], [1.0, -1.0], [0.3, 2.5]])
    def test_symmetric_finite_difference(self, upstream):
        x, g, alpha, h = np.array([5.0, -5.0]), np.array(upstream), 1.0, 1e-6

        def f(a):
            return float(np.sum(g * np.clip(x, -a, a)))

        numeric = (f(alpha + h) - f(alpha - h)) / (2 * h)
        assert abs(self.alpha_grad(x, alpha, g) - numeric) <= 1e-6

    def test_not_learnable(self):
        t = ad.Tensor([5.0])
        t.grad = np.ones(1)
        assert pact_range_backward(t, LearnableRange(1.0, learnable=False)) == 0.0

    def test_alpha_positive(self):
        with pytest.raises(ValueError):
            LearnableRange(0.0)
        r = LearnableRange(1.0)
        r.alpha = -3.0
        r.project()
        assert r.alpha > 0


class TestGradCheck:
    def data(self, seed, n=4, d=3):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(n, d)), rng.integers(0, 2, n)

    def test_linear_unquantized(self):
        x, y = self.data(0)
        m = build_mlp((3, 2), seed=0)
        r = grad_check(m, x, y)
        assert not r.quantized and r.max_rel_error < 1e-6

    def test_fake_quant_surrogate(self):
        x, y = self.data(1)
        m = max_calibrated(build_mlp((3, 6, 2), seed=1), x, shrink=0.8)
        r = grad_check(m, x, y)
        assert r.quantized and r.boundary_safe
        assert r.max_rel_error < 1e-4

    def test_gelu(self):
        x, y = self.data(2)
        r = grad_check(build_mlp((3, 6, 2), seed=2, activation=LayerKind.GELU), x, y)
        assert r.max_rel_error < 1e-5

    def test_mse_regression(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        r = grad_check(build_mlp((3, 4, 2), seed=3, activation=LayerKind.SWISH), x, y)
        assert r.max_rel_error < 1e-5


class TestTrain:
    def setup_method(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 2))
        self.data = Dataset(x, (x[:, 0] > x[:, 1]).astype(np.int64))
        self.model = max_calibrated(build_mlp((2, 8, 2), seed=0), x)

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 10, 0.1) == 0.1
        assert cosine_lr(9, 10, 0.1) == pytest.approx(0.001)
        assert cosine_lr(4, 10, 0.1) > cosine_lr(5, 10, 0.1)

    def test_zero_epochs(self):
        assert train(self.model, self.data, TrainConfig(epochs=0)) is self.model

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, lr=0.05, batch_size=8, seed=3, learn_ranges=True)
        a, b = train(self.model, self.data, cfg), train(self.model, self.data, cfg)
        for k in a.weights:
            assert a.weights[k].tobytes() == b.weights[k].tobytes()

    def test_fixed_ranges_not_mutated(self):
        out = train(self.model, self.data, TrainConfig(epochs=1, lr=0.05, batch_size=8))
        for a, b in zip(self.model.quantizable_layers, out.quantizable_layers):
            assert a.quant.activation_params == b.quant.activation_params
        assert any((self.model.weights[k] != out.weights[k]).any() for k in out.weights)

    def test_learned_ranges_only_change_alpha(self):
        out = train(self.model, self.data, TrainConfig(epochs=2, lr=0.05, batch_size=8, learn_ranges=True,
                                                       alpha_lr=0.5))
        changed = 0
        for a, b in zip(self.model.quantizable_layers, out.quantizable_layers):
            pa, pb = a.quant.activation_params, b.quant.activation_params
            assert (pa.scheme, pa.bit_width, pa.zero_point, pa.axis) == (pb.scheme, pb.bit_width, pb.zero_point,
                                                                        pb.axis)
            changed += pa.scale != pb.scale
        assert changed > 0

    def test_divergence(self):
        targets = Dataset(self.data.x, np.stack([self.data.y, 1 - self.data.y], axis=1).astype(np.float64))
        with pytest.raises(TrainingDivergedError, match="non-finite loss"), np.errstate(over="ignore", invalid="ignore"):
            train(self.model, targets, TrainConfig(epochs=3, lr=1e30, batch_size=8))

    def test_training_reduces_loss(self):
        before, _ = loss_and_grads(self.model, self.data.x, self.data.y)
        out = train(self.model, self.data, TrainConfig(epochs=5, lr=0.05, batch_size=8))
        after, _ = loss_and_grads(out, self.data.x, self.data.y)
        assert after < before


class TestNarrowMinimum:
    def test_loss_shape(self):
        loss = NarrowMinimumLoss()
        w = np.linspace(-3, 4, 70001)
        assert -0.6 < w[np.argmin(loss(w))] < -0.5
        assert loss(-1.0) > 0.9 and loss(2.0) < loss(-1.0)

    def test_ptq_vs_qat(self):
        r = narrow_minimum_experiment()
        assert r.w_ptq == -1.0 and r.loss_ptq >= 5 * r.loss_fp32
        grid = np.arange(-127, 128, dtype=np.float64)
        assert r.grid_min_loss == NarrowMinimumLoss()(grid).min()
        assert r.loss_qat <= 1.1 * r.grid_min_loss
        assert r.loss_qat < r.loss_ptq


def test_qat_not_worse_than_ptq_on_toy():
    model, train_data, eval_data = make_toy()
    report = run_ptq(model, train_data.subset(slice(0, 256)), eval_data)
    start = apply_calibration(model, report.best.entries)
    tuned = train(start, train_data, TrainConfig(epochs=3, lr=1e-3, batch_size=32))
    assert evaluate(tuned, eval_data) >= report.best.accuracy
