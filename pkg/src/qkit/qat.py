"""Quantization-aware fine-tuning with the straight-through estimator.

Enabled layers get fake quantization on their input activation (fixed,
calibrated range, or a learned PACT range) and on their weight (range
re-derived from the current weights by per-channel max at every step).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from qkit import autodiff as ad
from qkit.formats import Dataset
from qkit.graph import (DEFAULT_BN_EPS, TENSOR_ROLES, Layer, LayerKind, MissingCalibrationError,
                        Model, bn_coefficients)
from qkit.quant import QuantParams, fake_quantize, max_scale_params, round_half_away, scale_params

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LearnableRange:
    """Symmetric activation range ``[-alpha, alpha]`` learned during fine-tuning."""

    alpha: float
    learnable: bool = True
    grad: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")

    def params(self, bit_width: int = 8) -> QuantParams:
        return scale_params(self.alpha, bit_width)

    def project(self, floor: float = 1e-8) -> None:
        self.alpha = max(self.alpha, floor)


def fake_quant_forward_backward(x: ad.Tensor, params: QuantParams) -> ad.Tensor:
    """Fake-quantize ``x``; its backward passes gradients only inside ``[beta, alpha]``."""
    return ad.fake_quant(x, params)


def pact_range_backward(x: ad.Tensor, rng: LearnableRange, bit_width: int = 8) -> float:
    """Gradient of the loss w.r.t. ``rng.alpha``.

    ``x.value`` holds the inputs and ``x.grad`` the upstream gradient arriving
    at the fake-quant output. The result is also added to ``rng.grad``.
    """
    upstream = np.ones_like(x.value) if x.grad is None else x.grad
    if not rng.learnable:
        return 0.0
    g = ad.pact_alpha_grad(x.value, rng.alpha, upstream)
    rng.grad += g
    return g


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 1e-2
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    quantize: bool = True
    learn_ranges: bool = False
    alpha_lr: Optional[float] = None
    alpha_weight_decay: float = 0.0
    final_lr_ratio: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and lr > 0")


def cosine_lr(step: int, total: int, lr0: float, final_ratio: float = 0.01) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to ``lr0 * final_ratio`` at the last step."""
    lr_min = lr0 * final_ratio
    if total <= 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


# -- network construction -----------------------------------------------------

@dataclass
class _Net:
    """Parameters and options for building a differentiable copy of a model."""

    model: Model
    params: dict[str, ad.Tensor]
    mode: str = "qat"  # "qat" | "fp32" | "surrogate"
    ranges: dict[str, ad.Tensor] = field(default_factory=dict)
    residuals: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    frozen_params: dict[str, QuantParams] = field(default_factory=dict)
    taps: dict[str, np.ndarray] = field(default_factory=dict)


def _weight_bits(layer: Layer) -> int:
    return layer.quant.weight_params.bit_width if layer.quant.weight_params else 8


def _quant_activation(net: _Net, layer: Layer, h: ad.Tensor) -> ad.Tensor:
    act = layer.quant.activation_params
    if layer.name in net.ranges:
        bits = act.bit_width if act is not None else 8
        return ad.pact_fake_quant(h, net.ranges[layer.name], bits)
    if act is None:
        raise MissingCalibrationError(f"missing calibration for tensor {layer.input_tensor!r}")
    net.taps[layer.name] = h.value
    if net.mode == "surrogate":
        key = (layer.name, "act")
        if key not in net.residuals:
            lo, hi = act.real_bounds(h.value.ndim)
            net.residuals[key] = fake_quantize(h.value, act) - np.clip(h.value, lo, hi)
        return ad.frozen_clip(h, act, net.residuals[key])
    return ad.fake_quant(h, act)


def _tracked_fake_quant(w: ad.Tensor, params: QuantParams) -> ad.Tensor:
    # range follows the weights, so nothing is ever clipped: identity gradient
    return ad._node(fake_quantize(w.value, params), (w,), lambda g: (g,))


def _quant_weight(net: _Net, layer: Layer, w: ad.Tensor) -> ad.Tensor:
    if net.mode == "surrogate":
        key = (layer.name, "weight")
        if key not in net.residuals:
            params = max_scale_params(w.value, _weight_bits(layer), layer.weight_axis)
            net.residuals[key] = fake_quantize(w.value, params) - w.value
        return ad.add(w, net.residuals[key])
    params = max_scale_params(w.value, _weight_bits(layer), layer.weight_axis)
    return _tracked_fake_quant(w, params)


def _training_layers(model: Model, classification: bool) -> tuple[Layer, ...]:
    layers = model.layers
    if classification and layers and layers[-1].kind is LayerKind.SOFTMAX:
        layers = layers[:-1]
    return layers


def _forward(net: _Net, x: np.ndarray, classification: bool) -> ad.Tensor:
    h = ad.Tensor(x)
    model = net.model
    for layer in _training_layers(model, classification):
        kind = layer.kind
        if layer.quantizable:
            w = net.params[layer.tensors["weight"]]
            b = net.params.get(layer.tensors.get("bias", ""))
            if layer.quant.enabled and net.mode != "fp32":
                h = _quant_activation(net, layer, h)
                w = _quant_weight(net, layer, w)
            if kind is LayerKind.LINEAR:
                h = ad.linear(h, w, b)
            else:
                h = ad.conv2d(h, w, b, int(layer.attrs.get("stride", 1)), int(layer.attrs.get("padding", 0)))
        elif kind is LayerKind.BATCHNORM:
            t = {r: model.tensor(layer, r) for r in TENSOR_ROLES[kind]}
            c, d = bn_coefficients(t["gamma"], t["beta"], t["mean"], t["var"], layer.attrs.get("eps", DEFAULT_BN_EPS))
            h = ad.channel_affine(h, c, d)
        elif kind is LayerKind.RELU:
            h = ad.relu(h)
        elif kind is LayerKind.GELU:
            h = ad.gelu(h)
        elif kind is LayerKind.SWISH:
            h = ad.swish(h)
        elif kind is LayerKind.CLIPPED_GELU:
            h = ad.clipped_gelu(h, layer.attrs["limit"])
        elif kind is LayerKind.FLATTEN:
            h = ad.flatten(h)
        elif kind is LayerKind.SOFTMAX:
            raise ValueError("softmax is only supported as the final layer of a classifier")
    return h


def _loss(net: _Net, x: np.ndarray, y: np.ndarray) -> ad.Tensor:
    classification = np.issubdtype(np.asarray(y).dtype, np.integer)
    out = _forward(net, x, classification)
    return ad.softmax_cross_entropy(out, y) if classification else ad.mse(out, y)


def trainable_tensors(model: Model) -> list[str]:
    """Names of weights and biases of Linear/Conv2d layers, in layer order."""
    names = []
    for layer in model.quantizable_layers:
        for role in ("weight", "bias"):
            if role in layer.tensors:
                names.append(layer.tensors[role])
    return names


def _make_params(model: Model) -> dict[str, ad.Tensor]:
    return {n: ad.Tensor(model.weights[n].astype(np.float64), requires_grad=True, name=n)
            for n in trainable_tensors(model)}


# -- training -----------------------------------------------------------------

def train(model: Model, data: Dataset, config: TrainConfig) -> Model:
    """SGD with momentum and cosine-annealed learning rate.

    With ``config.quantize`` every enabled layer trains through fake
    quantization; activation ranges stay at their calibrated values unless
    ``config.learn_ranges``. Returns a new model whose weight params are
    re-derived (per-channel max) from the trained weights.
    """
    if config.epochs == 0 or len(data) == 0:
        return model
    rng = np.random.default_rng(config.seed)
    params = _make_params(model)
    net = _Net(model, params, mode="qat" if config.quantize else "fp32")
    if config.quantize and config.learn_ranges:
        for layer in model.quantizable_layers:
            act = layer.quant.activation_params
            if layer.quant.enabled:
                if act is None:
                    raise MissingCalibrationError(f"missing calibration for tensor {layer.input_tensor!r}")
                net.ranges[layer.name] = ad.Tensor(np.float64(act.qmax / act.scale), requires_grad=True,
                                                   name=layer.input_tensor)
    velocity = {k: np.zeros_like(p.value) for k, p in params.items()}
    alpha_velocity = {k: 0.0 for k in net.ranges}
    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    alpha_lr0 = config.alpha_lr if config.alpha_lr is not None else config.lr
    step = 0
    x_all = data.x.astype(np.float64)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            for p in params.values():
                p.zero_grad()
            for a in net.ranges.values():
                a.zero_grad()
            loss = _loss(net, x_all[idx], data.y[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            loss.backward()
            lr = cosine_lr(step, total, config.lr, config.final_lr_ratio)
            for k, p in params.items():
                g = np.zeros_like(p.value) if p.grad is None else p.grad
                g = g + config.weight_decay * p.value
                velocity[k] = config.momentum * velocity[k] + g
                p.value = p.value - lr * velocity[k]
            alpha_lr = cosine_lr(step, total, alpha_lr0, config.final_lr_ratio)
            for k, a in net.ranges.items():
                g = (0.0 if a.grad is None else float(a.grad)) + config.alpha_weight_decay * float(a.value)
                alpha_velocity[k] = config.momentum * alpha_velocity[k] + g
                a.value = np.float64(max(float(a.value) - alpha_lr * alpha_velocity[k], 1e-8))
            step += 1
        log.debug("epoch %d: last batch loss %.6g", epoch, value)
    weights = dict(model.weights)
    for k, p in params.items():
        weights[k] = p.value.astype(np.float32)
    trained = model.replace_layers(model.layers, weights)

    def update(layer: Layer) -> Layer:
        if not layer.quantizable:
            return layer
        changes = {}
        if layer.quant.weight_params is not None:
            wp = layer.quant.weight_params
            changes["weight_params"] = max_scale_params(trained.tensor(layer, "weight"), wp.bit_width,
                                                        wp.axis)
        if layer.name in net.ranges:
            bits = layer.quant.activation_params.bit_width
            changes["activation_params"] = scale_params(float(net.ranges[layer.name].value), bits)
        return layer.with_quant(**changes) if changes else layer

    return trained.map_layers(update)


def loss_value(model: Model, x: np.ndarray, y: np.ndarray, quantize: bool = True) -> float:
    net = _Net(model, _make_params(model), mode="qat" if quantize else "fp32")
    return float(_loss(net, np.asarray(x, dtype=np.float64), np.asarray(y)).value)


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray,
                   quantize: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its (straight-through) gradient for every trainable tensor."""
    params = _make_params(model)
    net = _Net(model, params, mode="qat" if quantize else "fp32")
    loss = _loss(net, np.asarray(x, dtype=np.float64), np.asarray(y))
    loss.backward()
    return float(loss.value), {k: np.zeros_like(p.value) if p.grad is None else p.grad for k, p in params.items()}


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    min_range_edge_distance: float  # in quantization steps; inf if nothing quantized
    min_rounding_boundary_distance: float
    quantized: bool

    @property
    def boundary_safe(self) -> bool:
        return self.min_range_edge_distance >= 0.25


def _step_distances(net: _Net) -> tuple[float, float]:
    edge, rounding = math.inf, math.inf
    for name, value in net.taps.items():
        act = net.model.layer(name).quant.activation_params
        scaled = act.scale * value + act.zero_point
        edge = min(edge, float(np.min(np.minimum(np.abs(scaled - act.qmin), np.abs(scaled - act.qmax)))))
        frac = scaled - np.floor(scaled)
        rounding = min(rounding, float(np.min(np.abs(frac - 0.5))))
    return edge, rounding


def grad_check(model: Model, x, y, epsilon: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Without quantized layers the network itself is differenced. With them,
    the analytic (straight-through) gradients are compared with differences
    of a surrogate in which fake quantization is replaced by clipping plus
    the rounding offset frozen at ``x``: equal in value at the point and
    smooth inside the range. Errors are normwise per tensor:
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    quantized = any(l.quant.enabled for l in model.quantizable_layers)
    params = _make_params(model)
    net = _Net(model, params, mode="qat")
    loss = _loss(net, x, y)
    loss.backward()
    analytic = {k: (np.zeros_like(p.value) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    edge, rounding = _step_distances(net)

    surrogate = _Net(model, params, mode="surrogate" if quantized else "fp32")
    base = float(_loss(surrogate, x, y).value)
    if quantized and not math.isclose(base, float(loss.value), rel_tol=1e-12, abs_tol=1e-15):
        raise AssertionError("surrogate does not reproduce the fake-quantized loss at the base point")
    per_tensor = {}
    for k, p in params.items():
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(_loss(surrogate, x, y).value)
            flat[i] = orig - epsilon
            down = float(_loss(surrogate, x, y).value)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * epsilon)
        scale = max(np.max(np.abs(analytic[k])), np.max(np.abs(numeric)), 1e-300)
        per_tensor[k] = float(np.max(np.abs(analytic[k] - numeric)) / scale)
    return GradCheckReport(max(per_tensor.values(), default=0.0), per_tensor, edge, rounding, quantized)


# -- 1-D narrow-minimum illustration ------------------------------------------

@dataclass(frozen=True)
class NarrowMinimumLoss:
    """``base - narrow bump - wide bump``: a deep narrow valley next to a shallow wide one."""

    base: float = 1.0
    narrow_center: float = -0.55
    narrow_width: float = 0.08
    narrow_depth: float = 0.9
    wide_center: float = 2.0
    wide_width: float = 1.2
    wide_depth: float = 0.6

    def __call__(self, w):
        w = np.asarray(w, dtype=np.float64)
        return (self.base
                - self.narrow_depth * np.exp(-(w - self.narrow_center) ** 2 / (2 * self.narrow_width ** 2))
                - self.wide_depth * np.exp(-(w - self.wide_center) ** 2 / (2 * self.wide_width ** 2)))

    def tensor(self, w: ad.Tensor) -> ad.Tensor:
        def bump(center, width, depth):
            d = ad.add(w, -center)
            return ad.mul(ad.exp(ad.mul(ad.square(d), -1.0 / (2 * width ** 2))), -depth)
        return ad.add(ad.add(bump(self.narrow_center, self.narrow_width, self.narrow_depth),
                             bump(self.wide_center, self.wide_width, self.wide_depth)), self.base)


@dataclass
class NarrowMinimumResult:
    w_fp32: float
    loss_fp32: float
    w_ptq: float
    loss_ptq: float
    w_qat: float          # final real-valued weight
    w_qat_grid: float     # its grid point
    loss_qat: float
    grid_min_loss: float
    grid_argmin: float
    trajectory: list[float]


def narrow_minimum_experiment(loss: NarrowMinimumLoss = NarrowMinimumLoss(), steps: int = 100,
                              lr: float = 2.0, pretrain_steps: int = 2000, pretrain_lr: float = 1e-3,
                              init: float = -0.4) -> NarrowMinimumResult:
    """Pretrain in fp32, round with scale 1 (PTQ), then fine-tune through fake quantization."""
    params = scale_params(127.0, 8)  # s = 1: grid points are the integers
    w = ad.Tensor(np.float64(init), requires_grad=True)
    for _ in range(pretrain_steps):
        w.zero_grad()
        loss.tensor(w).backward()
        w.value = w.value - pretrain_lr * w.grad
    w_fp32 = float(w.value)
    w_ptq = float(round_half_away(w_fp32))
    trajectory = [w_fp32]
    for _ in range(steps):
        w.zero_grad()
        loss.tensor(ad.fake_quant(w, params)).backward()
        w.value = w.value - lr * w.grad
        trajectory.append(float(w.value))
    w_qat = float(w.value)
    w_qat_grid = float(fake_quantize(w_qat, params))
    grid = np.arange(params.qmin, params.qmax + 1, dtype=np.float64)
    grid_loss = loss(grid)
    k = int(np.argmin(grid_loss))
    return NarrowMinimumResult(w_fp32, float(loss(w_fp32)), w_ptq, float(loss(w_ptq)), w_qat, w_qat_grid,
                               float(loss(w_qat_grid)), float(grid_loss[k]), float(grid[k]), trajectory)
