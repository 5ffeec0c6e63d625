import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from golden import GOLDEN_TOP1, golden_dataset, golden_model
from qkit.calib import DEFAULT_METHODS, CalibrationError, CalibrationMethod, Histogram
from qkit.formats import Dataset
from qkit.graph import Layer, LayerKind, Model, forward_fp32
from qkit.toy import make_toy
from qkit.workflow import (PtqReport, SensitivityReport, apply_calibration, calibrate_model, calibrated_layers,
                           evaluate, gelu10, partial_quantize, predict, relative_change, run_ptq,
                           sensitivity_scan)


@pytest.fixture(scope="module")
def toy():
    return make_toy()


@pytest.fixture(scope="module")
def poisoned():
    return make_toy(poison=True)


def calibrated(model, data, method=CalibrationMethod.max()):
    return apply_calibration(model, calibrate_model(model, data, method))


def identity_model(n=2, name="fc"):
    return Model((Layer(LayerKind.LINEAR, name, {"weight": "w"}),), {"w": np.eye(n)}, (n,))


class TestEvaluate:
    def test_perfect(self):
        data = Dataset(np.eye(2)[[0, 1, 1, 0]], [0, 1, 1, 0])
        assert evaluate(identity_model(), data) == 100.0

    def test_constant_predictor(self):
        m = Model((Layer(LayerKind.LINEAR, "fc", {"weight": "w", "bias": "b"}),),
                  {"w": np.zeros((2, 2)), "b": np.array([1.0, 0.0])}, (2,))
        data = Dataset(np.random.default_rng(0).normal(size=(10, 2)), [0, 1] * 5)
        assert evaluate(m, data) == 50.0

    def test_golden(self):
        assert evaluate(golden_model(), golden_dataset(), quantized=False) == GOLDEN_TOP1

    def test_mse_threshold(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
        y = np.array([[0.0, 0.1], [1.0, 1.0], [0.0, 0.0]])
        assert evaluate(identity_model(), Dataset(x, y), "mse-threshold") == pytest.approx(200 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(identity_model(), Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int)))

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            evaluate(identity_model(), Dataset(np.eye(2), [0, 1]), "top5")

    @given(st.floats(0, 100), st.floats(0.01, 100))
    def test_relative_change(self, a8, a32):
        assert abs(relative_change(a8, a32) - (a8 - a32) / a32) <= 1e-12


class TestCalibrateModel:
    def test_one_entry_per_input(self, toy):
        model, train, _ = toy
        entries = calibrate_model(model, train, CalibrationMethod.max())
        assert [e.tensor for e in entries] == ["fc1.input", "fc2.input"]
        assert entries[0].alpha == float(np.abs(train.x).max())

    def test_degenerate_tensor_skipped(self, caplog):
        data = Dataset(np.zeros((4, 3)), [0, 1, 0, 1])
        with caplog.at_level(logging.WARNING):
            entries = calibrate_model(golden_model(), data, CalibrationMethod.max())
        assert [e.tensor for e in entries] == ["fc2.input"]
        assert "fc1.input" in caplog.text and "degenerate" in caplog.text
        assert calibrated_layers(apply_calibration(golden_model(), entries)) == ["fc2"]

    def test_failure_names_tensor(self):
        hists = {"fc1.input": Histogram(), "fc2.input": Histogram()}
        with pytest.raises(CalibrationError, match="fc1.input"):
            calibrate_model(golden_model(), None, CalibrationMethod.max(), histograms=hists)

    def test_gelu10_rewrite(self):
        m = gelu10(golden_model())
        assert m.layer("act").kind is LayerKind.CLIPPED_GELU


class TestPtq:
    def test_no_quantizable_layers(self):
        m = Model((Layer(LayerKind.RELU, "r"),), {}, (2,))
        data = Dataset(np.random.default_rng(0).normal(size=(20, 2)), [0, 1] * 10)
        r = run_ptq(m, data, data)
        assert len(r.rows) == 4
        assert all(row.accuracy == r.fp32_accuracy for row in r.rows)

    def test_default_methods_on_toy(self, toy):
        model, train, ev = toy
        r = run_ptq(model, train, ev)
        assert [row.method for row in r.rows] == list(DEFAULT_METHODS)
        assert all(0 <= row.accuracy <= 100 for row in r.rows)
        assert r.best.accuracy == max(row.accuracy for row in r.rows)
        for row in r.rows:
            assert row.relative_change == relative_change(row.accuracy, r.fp32_accuracy)

    def test_ties_prefer_max(self, toy):
        model, train, ev = toy
        r = run_ptq(model, train, ev, [CalibrationMethod.percentile(0.9999), CalibrationMethod.max()])
        if r.rows[0].accuracy == r.rows[1].accuracy:
            assert r.best.method.kind == "max"

    def test_empty_method_list(self, toy):
        model, train, ev = toy
        with pytest.raises(ValueError):
            run_ptq(model, train, ev, [])

    def test_report_round_trip(self, toy):
        model, train, ev = toy
        r = run_ptq(model, train, ev)
        back = PtqReport.from_text(r.to_text())
        assert back.to_text() == r.to_text() and back.best_index == r.best_index
        assert "fp32" in r.render_table()

    def test_poisoned_not_acceptable(self, poisoned):
        model, train, ev = poisoned
        r = run_ptq(model, train, ev)
        assert r.fp32_accuracy > 95 and not r.acceptable(0.01)


class TestSensitivity:
    def test_single_layer(self):
        data = Dataset(np.random.default_rng(1).normal(size=(50, 2)), [0, 1] * 25)
        data = Dataset(data.x, (data.x[:, 1] > data.x[:, 0]).astype(int))
        m = calibrated(identity_model(), data)
        r = sensitivity_scan(m, data)
        assert r.order == ["fc"] and r.entries[0][1] == evaluate(m, data)

    def test_pathological_weights_rank_first(self, toy):
        model, train, ev = toy
        w1, b1, w2 = (model.weights[k].copy() for k in ("fc1.weight", "fc1.bias", "fc2.weight"))
        # unit 0 of the hidden layer is dead; its outgoing weights are scaled by 1e6
        w1[:, 0], b1[0] = 0.0, -1.0
        w2[0] *= 1e6
        bad = Model(model.layers, {**model.weights, "fc1.weight": w1, "fc1.bias": b1, "fc2.weight": w2},
                    model.input_shape)
        r = sensitivity_scan(calibrated(bad, train), ev)
        assert r.order[0] == "fc2"
        assert r.entries[0][1] < r.entries[1][1]

    def test_duplicate_layers_tie_by_index(self):
        layers = (Layer(LayerKind.LINEAR, "a", {"weight": "w"}), Layer(LayerKind.LINEAR, "b", {"weight": "w2"}))
        m = Model(layers, {"w": np.eye(2), "w2": np.eye(2)}, (2,))
        x = np.random.default_rng(2).normal(size=(40, 2))
        data = Dataset(x, (x[:, 0] > x[:, 1]).astype(int))
        r = sensitivity_scan(calibrated(m, data), data)
        assert r.order == ["a", "b"] and r.entries[0][1] == r.entries[1][1]

    def test_threads_do_not_change_report(self, toy):
        model, train, ev = toy
        m = calibrated(model, train)
        assert sensitivity_scan(m, ev, threads=4).to_text() == sensitivity_scan(m, ev).to_text()

    def test_round_trip(self, toy):
        model, train, ev = toy
        r = sensitivity_scan(calibrated(model, train), ev)
        assert SensitivityReport.from_text(r.to_text()).to_text() == r.to_text()
        assert all(0 <= acc <= 100 for _, acc in r.entries)


class TestPartial:
    def test_reached_without_skipping(self, toy):
        model, train, ev = toy
        m = calibrated(model, train)
        full = evaluate(m, ev)
        res = partial_quantize(m, ev, sensitivity_scan(m, ev), full)
        assert res.skipped == [] and res.status == "reached"

    def test_poisoned_layer_skipped(self, poisoned):
        model, train, ev = poisoned
        m = calibrated(model, train)
        fp32 = evaluate(m, ev, quantized=False)
        res = partial_quantize(m, ev, sensitivity_scan(m, ev), fp32)
        assert res.skipped == ["fc1"] and res.reached

    def test_unreachable(self, toy):
        model, train, ev = toy
        m = calibrated(model, train)
        fp32 = evaluate(m, ev, quantized=False)
        res = partial_quantize(m, ev, sensitivity_scan(m, ev), fp32 + 0.1)
        assert res.status == "unreachable" and len(res.skipped) == 2
        assert "status: unreachable" in res.to_text()

    def test_trajectory_matches_fresh_evaluation(self, poisoned):
        model, train, ev = poisoned
        m = calibrated(model, train, CalibrationMethod.entropy())
        res = partial_quantize(m, ev, sensitivity_scan(m, ev), 100.0)
        names = calibrated_layers(m)
        for skipped, acc in res.trajectory:
            assert evaluate(m.with_enabled([n for n in names if n not in skipped]), ev) == acc

    def test_all_disabled_is_fp32(self, toy):
        model, train, ev = toy
        m = calibrated(model, train).with_enabled([])
        np.testing.assert_array_equal(predict(m, ev.x), forward_fp32(model, ev.x))
        assert evaluate(m, ev) == evaluate(model, ev, quantized=False)

    def test_report_must_match_model(self, toy):
        model, train, ev = toy
        m = calibrated(model, train)
        with pytest.raises(ValueError):
            partial_quantize(m, ev, SensitivityReport(100.0, [("fc1", 50.0)]), 90.0)
