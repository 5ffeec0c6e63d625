"""Calibrate, compare PTQ methods, rank layer sensitivity, skip sensitive layers.

Quantization settings live on the model (per-layer ``QuantConfig``), so every
stage works on immutable models and evaluation is a pure function of
``(model, data)``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from qkit.calib import (DEFAULT_BINS, DEFAULT_METHODS, CacheEntry, CalibrationError, CalibrationMethod,
                        Histogram, calibrate)
from qkit.formats import Dataset
from qkit.graph import Layer, Model, quantize_weights, replace_gelu, run
from qkit.quant import scale_params

EVAL_BATCH = 4096

log = logging.getLogger(__name__)


# -- evaluation ---------------------------------------------------------------

def predict(model: Model, x: np.ndarray, quantized: bool = True) -> np.ndarray:
    outs = [run(model, x[i:i + EVAL_BATCH], quantized=quantized) for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate(model: Model, data: Dataset, metric: str = "top1", quantized: bool = True,
             threshold: float = 0.1) -> float:
    """Accuracy in percent.

    ``top1``: share of samples whose arg-max output equals the label.
    ``mse-threshold``: share of samples whose mean squared error is at most
    ``threshold``. ``quantized=False`` ignores every layer's quantization flag.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    out = predict(model, data.x, quantized)
    if metric == "top1":
        if not data.is_classification:
            raise ValueError("top1 needs integer class labels")
        hits = np.argmax(out.reshape(len(out), -1), axis=1) == data.y.reshape(-1)
    elif metric == "mse-threshold":
        err = (out.reshape(len(out), -1) - data.y.reshape(len(out), -1).astype(np.float64)) ** 2
        hits = err.mean(axis=1) <= threshold
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return 100.0 * float(np.count_nonzero(hits)) / len(hits)


def relative_change(acc_int8: float, acc_fp32: float) -> float:
    """``(acc_int8 - acc_fp32) / acc_fp32``."""
    if acc_fp32 == 0:
        return 0.0 if acc_int8 == 0 else math.inf
    return (acc_int8 - acc_fp32) / acc_fp32


# -- calibration --------------------------------------------------------------

def collect_histograms(model: Model, data: Dataset, num_bins: int = DEFAULT_BINS,
                       batch_size: int = EVAL_BATCH) -> dict[str, Histogram]:
    """Histograms of the fp32 input of every quantizable layer, keyed by tensor name."""
    hists = {l.input_tensor: Histogram(num_bins) for l in model.quantizable_layers}

    def observe(layer: Layer, x: np.ndarray) -> None:
        hists[layer.input_tensor].observe(x)

    for i in range(0, len(data), batch_size):
        run(model, data.x[i:i + batch_size], quantized=False, observer=observe)
    return hists


def calibrate_model(model: Model, data: Optional[Dataset], method: CalibrationMethod,
                    num_bins: int = DEFAULT_BINS, bit_width: int = 8,
                    histograms: Optional[Mapping[str, Histogram]] = None) -> list[CacheEntry]:
    """One cache entry per activation tensor feeding a quantizable layer.

    Identically-zero tensors have no usable range; they get no entry (their
    layers stay unquantized) and a warning names them.

    Raises:
        CalibrationError: naming the tensor, for any other calibration failure.
    """
    if histograms is None:
        if data is None or len(data) == 0:
            raise ValueError("calibration needs a non-empty dataset")
        histograms = collect_histograms(model, data, num_bins)
    entries = []
    for layer in model.quantizable_layers:
        name = layer.input_tensor
        try:
            rng = calibrate(histograms[name], method, bit_width)
        except CalibrationError as exc:
            if histograms[name].total_count and histograms[name].observed_max_abs == 0.0:
                log.warning("%s: degenerate tensor (all zeros), left unquantized", name)
                continue
            raise CalibrationError(f"{name}: {exc}") from None
        entries.append(CacheEntry(name, method, rng.alpha))
    return entries


def apply_calibration(model: Model, entries: Iterable[CacheEntry] | Mapping[str, CacheEntry],
                      bit_width: int = 8, enabled: Optional[Iterable[str]] = None,
                      per_channel: bool = True) -> Model:
    """Attach per-channel max weight params and cached activation params.

    Quantization is enabled on ``enabled`` (default: every layer that ends up
    with activation params). A layer enabled without activation params fails
    at int8 evaluation.
    """
    if not isinstance(entries, Mapping):
        entries = {e.tensor: e for e in entries}
    model = quantize_weights(model, per_channel, bit_width)

    def attach(layer: Layer) -> Layer:
        if not layer.quantizable:
            return layer
        e = entries.get(layer.input_tensor)
        act = layer.quant.activation_params if e is None else scale_params(e.alpha, bit_width)
        return layer.with_quant(activation_params=act)

    model = model.map_layers(attach)
    return model.with_enabled(calibrated_layers(model) if enabled is None else enabled)


def calibrated_layers(model: Model) -> list[str]:
    """Quantizable layers that carry activation params, in model order."""
    return [l.name for l in model.quantizable_layers if l.quant.activation_params is not None]


def gelu10(model: Model) -> Model:
    """Clip every GELU at 10 before calibration."""
    return replace_gelu(model, 10.0)


# -- PTQ sweep ----------------------------------------------------------------

@dataclass
class PtqRow:
    method: CalibrationMethod
    accuracy: float
    relative_change: float
    entries: list[CacheEntry] = field(default_factory=list, repr=False)


@dataclass
class PtqReport:
    fp32_accuracy: float
    rows: list[PtqRow]
    best_index: int
    metric: str = "top1"

    @property
    def best(self) -> PtqRow:
        return self.rows[self.best_index]

    def acceptable(self, max_drop: float = 0.01) -> bool:
        """True if the best method loses at most ``max_drop`` relative accuracy."""
        return self.best.relative_change >= -max_drop

    def to_text(self) -> str:
        lines = ["report: ptq", f"metric: {self.metric}", f"fp32_accuracy: {self.fp32_accuracy!r}",
                 f"methods: {len(self.rows)}"]
        for i, r in enumerate(self.rows):
            lines += [f"method.{i}.name: {r.method}", f"method.{i}.accuracy: {r.accuracy!r}",
                      f"method.{i}.relative_change: {r.relative_change!r}"]
        lines.append(f"best: {self.best.method}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PtqReport":
        kv = _parse_kv(text, "ptq")
        rows = [PtqRow(CalibrationMethod.parse(kv[f"method.{i}.name"]), float(kv[f"method.{i}.accuracy"]),
                       float(kv[f"method.{i}.relative_change"])) for i in range(int(kv["methods"]))]
        best = [str(r.method) for r in rows].index(kv["best"])
        return cls(float(kv["fp32_accuracy"]), rows, best, kv["metric"])

    def render_table(self) -> str:
        out = [f"{'method':<16}{'accuracy':>10}{'rel. change':>14}",
               f"{'fp32':<16}{self.fp32_accuracy:>10.2f}{'':>14}"]
        for i, r in enumerate(self.rows):
            mark = " *" if i == self.best_index else ""
            out.append(f"{r.method.label:<16}{r.accuracy:>10.2f}{100 * r.relative_change:>13.2f}%{mark}")
        return "\n".join(out) + "\n"


def _parse_kv(text: str, kind: str) -> dict[str, str]:
    kv = {}
    for line in text.splitlines():
        if line.strip():
            key, sep, value = line.partition(": ")
            if not sep:
                raise ValueError(f"malformed report line {line!r}")
            kv[key] = value
    if kv.get("report") != kind:
        raise ValueError(f"not a {kind} report")
    return kv


def run_ptq(model: Model, calib_data: Dataset, eval_data: Dataset,
            methods: Sequence[CalibrationMethod] = DEFAULT_METHODS, metric: str = "top1",
            num_bins: int = DEFAULT_BINS, bit_width: int = 8) -> PtqReport:
    """Weights per-channel max; activations calibrated by each method in turn.

    The best method has the highest accuracy; ties prefer max calibration,
    then the earlier method.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("run_ptq needs at least one calibration method")
    if len(calib_data) == 0 or len(eval_data) == 0:
        raise ValueError("run_ptq needs non-empty calibration and evaluation data")
    fp32 = evaluate(model, eval_data, metric, quantized=False)
    hists = collect_histograms(model, calib_data, num_bins)
    rows = []
    for m in methods:
        entries = calibrate_model(model, None, m, num_bins, bit_width, hists)
        acc = evaluate(apply_calibration(model, entries, bit_width), eval_data, metric)
        rows.append(PtqRow(m, acc, relative_change(acc, fp32), entries))
    best = min(range(len(rows)), key=lambda i: (-rows[i].accuracy, rows[i].method.kind != "max", i))
    return PtqReport(fp32, rows, best, metric)


# -- sensitivity and partial quantization -------------------------------------

@dataclass
class SensitivityReport:
    """Layers ordered most sensitive first (lowest accuracy when quantized alone)."""

    fp32_accuracy: float
    entries: list[tuple[str, float]]
    metric: str = "top1"

    @property
    def order(self) -> list[str]:
        return [name for name, _ in self.entries]

    def to_text(self) -> str:
        lines = ["report: sensitivity", f"metric: {self.metric}", f"fp32_accuracy: {self.fp32_accuracy!r}",
                 f"layers: {len(self.entries)}"]
        for i, (name, acc) in enumerate(self.entries):
            lines += [f"layer.{i}.name: {name}", f"layer.{i}.accuracy: {acc!r}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SensitivityReport":
        kv = _parse_kv(text, "sensitivity")
        entries = [(kv[f"layer.{i}.name"], float(kv[f"layer.{i}.accuracy"])) for i in range(int(kv["layers"]))]
        return cls(float(kv["fp32_accuracy"]), entries, kv["metric"])

    def render_table(self) -> str:
        out = [f"{'rank':<6}{'layer':<24}{'accuracy':>10}"]
        for i, (name, acc) in enumerate(self.entries):
            out.append(f"{i + 1:<6}{name:<24}{acc:>10.2f}")
        return "\n".join(out) + "\n"


def sensitivity_scan(model: Model, eval_data: Dataset, metric: str = "top1",
                     threads: int = 1) -> SensitivityReport:
    """Quantize one layer at a time (weights and input) and evaluate.

    Covers every layer that carries activation params (see
    :func:`apply_calibration`).
    """
    layers = [model.layer(n) for n in calibrated_layers(model)]
    fp32 = evaluate(model, eval_data, metric, quantized=False)

    def one(layer: Layer) -> float:
        return evaluate(model.with_enabled([layer.name]), eval_data, metric)

    if threads > 1 and len(layers) > 1:
        with ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(one, layers))
    else:
        accs = [one(l) for l in layers]
    ranked = sorted(range(len(layers)), key=lambda i: (accs[i], model.index(layers[i].name)))
    return SensitivityReport(fp32, [(layers[i].name, accs[i]) for i in ranked], metric)


@dataclass
class PartialResult:
    model: Model
    skipped: list[str]
    trajectory: list[tuple[tuple[str, ...], float]]
    target: float

    @property
    def reached(self) -> bool:
        return self.trajectory[-1][1] >= self.target

    @property
    def status(self) -> str:
        return "reached" if self.reached else "unreachable"

    @property
    def accuracy(self) -> float:
        return self.trajectory[-1][1]

    def to_text(self) -> str:
        lines = ["report: partial", f"status: {self.status}", f"target: {self.target!r}",
                 f"accuracy: {self.accuracy!r}", f"skipped: {','.join(self.skipped)}",
                 f"steps: {len(self.trajectory)}"]
        for i, (skip, acc) in enumerate(self.trajectory):
            lines += [f"step.{i}.skipped: {','.join(skip)}", f"step.{i}.accuracy: {acc!r}"]
        return "\n".join(lines) + "\n"


def partial_quantize(model: Model, eval_data: Dataset, report: SensitivityReport, target: float,
                     metric: Optional[str] = None) -> PartialResult:
    """Leave the most sensitive layers in floating point until ``target`` is met.

    Starts from every quantizable layer enabled and re-evaluates after each
    skip. If even skipping all of them misses the target the result's status
    is ``"unreachable"``.
    """
    metric = metric or report.metric
    names = calibrated_layers(model)
    if sorted(report.order) != sorted(names):
        raise ValueError("sensitivity report does not cover exactly the model's calibrated layers")
    skipped: list[str] = []
    current = model.with_enabled(names)
    trajectory = [((), evaluate(current, eval_data, metric))]
    for name in report.order:
        if trajectory[-1][1] >= target:
            break
        skipped.append(name)
        current = model.with_enabled([n for n in names if n not in skipped])
        trajectory.append((tuple(skipped), evaluate(current, eval_data, metric)))
    return PartialResult(current, skipped, trajectory, target)
