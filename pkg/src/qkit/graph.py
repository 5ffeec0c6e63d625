"""Sequential models: fp32 reference execution, int8 execution, BN folding.

Linear weights are stored ``(in, out)`` so ``y = x @ W + b`` and per-column
weight scales live on axis 1. Conv2d weights are OIHW with per-output-channel
scales on axis 0. Only Linear and Conv2d layers are ever quantized.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import numpy as np
from scipy import special

from qkit import kernels
from qkit.quant import QuantParams, Scheme, max_scale_params, quantize

DEFAULT_BN_EPS = 1e-5


class LayerKind(str, enum.Enum):
    LINEAR = "linear"
    CONV2D = "conv2d"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    GELU = "gelu"
    SWISH = "swish"
    CLIPPED_GELU = "clipped_gelu"
    SOFTMAX = "softmax"
    FLATTEN = "flatten"


QUANTIZABLE = frozenset({LayerKind.LINEAR, LayerKind.CONV2D})

# weight-store roles each kind needs; bias is optional for linear/conv
TENSOR_ROLES = {
    LayerKind.LINEAR: ("weight", "bias"),
    LayerKind.CONV2D: ("weight", "bias"),
    LayerKind.BATCHNORM: ("gamma", "beta", "mean", "var"),
}


class MissingCalibrationError(LookupError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    enabled: bool = False
    weight_params: Optional[QuantParams] = None
    activation_params: Optional[QuantParams] = None


@dataclass(frozen=True)
class Layer:
    kind: LayerKind
    name: str
    tensors: Mapping[str, str] = field(default_factory=dict)
    attrs: Mapping[str, float] = field(default_factory=dict)
    quant: QuantConfig = QuantConfig()

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "tensors", dict(self.tensors))
        object.__setattr__(self, "attrs", dict(self.attrs))
        if self.quant.enabled and not self.quantizable:
            raise ValueError(f"layer {self.name!r} ({self.kind.value}) cannot be quantized")
        if self.kind is LayerKind.CLIPPED_GELU and not self.attrs.get("limit", 0) > 0:
            raise ValueError("clipped_gelu needs a positive limit")

    @property
    def quantizable(self) -> bool:
        return self.kind in QUANTIZABLE

    @property
    def input_tensor(self) -> str:
        """Name of the activation tensor feeding this layer (calibration key)."""
        return f"{self.name}.input"

    @property
    def weight_axis(self) -> int:
        """Output-channel axis of the weight: per-column for linear, per-kernel for conv."""
        return 1 if self.kind is LayerKind.LINEAR else 0

    def with_quant(self, **changes) -> "Layer":
        return dataclasses.replace(self, quant=dataclasses.replace(self.quant, **changes))


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]
    weights: Mapping[str, np.ndarray]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        store = {}
        for name, arr in self.weights.items():
            arr = np.asarray(arr, dtype=np.float32)
            arr.setflags(write=False)
            store[name] = arr
        object.__setattr__(self, "weights", store)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for layer in self.layers:
            for role, tname in layer.tensors.items():
                if tname not in store:
                    raise KeyError(f"layer {layer.name!r}: tensor {tname!r} ({role}) not in weight store")

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(name)

    @property
    def quantizable_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.quantizable]

    def tensor(self, layer: Layer, role: str) -> Optional[np.ndarray]:
        name = layer.tensors.get(role)
        return None if name is None else self.weights[name]

    def replace_layers(self, layers: Iterable[Layer], weights: Optional[Mapping[str, np.ndarray]] = None) -> "Model":
        return Model(tuple(layers), self.weights if weights is None else weights, self.input_shape)

    def map_layers(self, fn: Callable[[Layer], Layer]) -> "Model":
        return self.replace_layers(fn(l) for l in self.layers)

    def with_enabled(self, names: Optional[Iterable[str]]) -> "Model":
        """Enable quantization on exactly ``names`` (all quantizable layers if None)."""
        keep = None if names is None else set(names)
        return self.map_layers(lambda l: l.with_quant(enabled=l.quantizable and (keep is None or l.name in keep))
                               if l.quantizable else l)

    def equals(self, other: "Model") -> bool:
        return (self.layers == other.layers and self.input_shape == other.input_shape
                and self.weights.keys() == other.weights.keys()
                and all(np.array_equal(self.weights[k], other.weights[k]) for k in self.weights))


# -- activations -------------------------------------------------------------

def gelu(x):
    """``x/2 * (1 + erf(x/sqrt(2)))``; erf from scipy (Cephes rational approximations)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + special.erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def swish(x):
    x = np.asarray(x, dtype=np.float64)
    return x * special.expit(x)


def swish_grad(x):
    x = np.asarray(x, dtype=np.float64)
    sig = special.expit(x)
    return sig + x * sig * (1.0 - sig)


def clipped_gelu(x, limit: float):
    if not limit > 0:
        raise ValueError("limit must be > 0")
    return np.minimum(gelu(x), limit)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(x, axis: int = -1):
    return special.softmax(np.asarray(x, dtype=np.float64), axis=axis)


# -- execution ---------------------------------------------------------------

def bn_coefficients(gamma, beta, mean, var, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(c, d)`` with ``BN(y) = c*y + d``."""
    gamma, beta, mean, var = (np.asarray(a, dtype=np.float64) for a in (gamma, beta, mean, var))
    if np.any(var < 0) or eps < 0 or np.any(var + eps <= 0):
        raise ValueError("batch norm needs Var >= 0, eps >= 0 and Var + eps > 0")
    inv = 1.0 / np.sqrt(var + eps)
    return gamma * inv, beta - gamma * mean * inv


def _channel_shape(ndim: int) -> tuple[int, ...]:
    return (1, -1) + (1,) * (ndim - 2)


def _linear_input(layer: Layer, x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"layer {layer.name!r}: input {x.shape} does not match weight {w.shape}")


def _conv_args(layer: Layer) -> tuple[int, int]:
    return int(layer.attrs.get("stride", 1)), int(layer.attrs.get("padding", 0))


def _eval_layer(model: Model, layer: Layer, x: np.ndarray, quantized: bool) -> np.ndarray:
    kind = layer.kind
    if kind in QUANTIZABLE:
        w = model.tensor(layer, "weight").astype(np.float64)
        b = model.tensor(layer, "bias")
        b = None if b is None else b.astype(np.float64)
        if quantized and layer.quant.enabled:
            return _eval_quantized(layer, x, w, b)
        if kind is LayerKind.LINEAR:
            _linear_input(layer, x, w)
            y = x @ w
            return y if b is None else y + b
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {layer.name!r}: input {x.shape} does not match kernel {w.shape}")
        stride, padding = _conv_args(layer)
        return kernels.conv2d_im2col(x, w, stride, padding, b)
    if kind is LayerKind.BATCHNORM:
        t = {r: model.tensor(layer, r) for r in TENSOR_ROLES[kind]}
        c, d = bn_coefficients(t["gamma"], t["beta"], t["mean"], t["var"], layer.attrs.get("eps", DEFAULT_BN_EPS))
        if x.ndim < 2 or x.shape[1] != len(c):
            raise ShapeError(f"layer {layer.name!r}: {len(c)} channels, input {x.shape}")
        shape = _channel_shape(x.ndim)
        return x * c.reshape(shape) + d.reshape(shape)
    if kind is LayerKind.RELU:
        return relu(x)
    if kind is LayerKind.GELU:
        return gelu(x)
    if kind is LayerKind.SWISH:
        return swish(x)
    if kind is LayerKind.CLIPPED_GELU:
        return clipped_gelu(x, layer.attrs["limit"])
    if kind is LayerKind.SOFTMAX:
        return softmax(x, axis=-1)
    if kind is LayerKind.FLATTEN:
        return x.reshape(x.shape[0], -1)
    raise ValueError(f"unknown layer kind {kind}")


def _eval_quantized(layer: Layer, x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> np.ndarray:
    act, wp = layer.quant.activation_params, layer.quant.weight_params
    if act is None:
        raise MissingCalibrationError(f"missing calibration for tensor {layer.input_tensor!r}")
    if wp is None:
        raise MissingCalibrationError(f"missing weight quantization params for layer {layer.name!r}")
    if act.scheme is not Scheme.SCALE or not act.per_tensor:
        raise ValueError(f"layer {layer.name!r}: activations must use per-tensor scale quantization")
    if wp.scheme is not Scheme.SCALE:
        raise ValueError(f"layer {layer.name!r}: affine weights are not supported on the int8 path")
    xq = quantize(x, act)
    wq = quantize(w, wp)
    if layer.kind is LayerKind.LINEAR:
        _linear_input(layer, x, w)
        y = kernels.integer_matmul_scale(xq, kernels.QLinearWeights.from_quantized(wq))
        return y if b is None else y + b
    stride, padding = _conv_args(layer)
    return kernels.conv2d_im2col(xq, wq, stride, padding, b)


Observer = Callable[[Layer, np.ndarray], None]


def run(model: Model, x, quantized: bool = False, observer: Optional[Observer] = None) -> np.ndarray:
    """Evaluate layer by layer in float64.

    ``observer(layer, input)`` is called before every quantizable layer with
    the real-valued activation entering it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"model expects samples of shape {model.input_shape}, got {x.shape[1:]}")
    for layer in model.layers:
        if observer is not None and layer.quantizable:
            observer(layer, x)
        x = _eval_layer(model, layer, x, quantized)
    return x


def forward_fp32(model: Model, x) -> np.ndarray:
    return run(model, x, quantized=False)


def forward_int8(model: Model, x) -> np.ndarray:
    """Enabled layers quantize their inputs and weights and run the integer kernels;
    outputs stay real. Disabled layers run exactly as in :func:`forward_fp32`."""
    return run(model, x, quantized=True)


# -- graph rewrites ----------------------------------------------------------

def fold_batch_norm(model: Model) -> Model:
    """Absorb every BatchNorm into the preceding Linear/Conv2d.

    ``w' = c*w`` per output channel and ``b' = c*b + d``. Weight quantization
    params of folded layers are dropped since they no longer describe the weights.
    """
    layers: list[Layer] = []
    weights = dict(model.weights)
    for layer in model.layers:
        if layer.kind is not LayerKind.BATCHNORM:
            layers.append(layer)
            continue
        if not layers or layers[-1].kind not in QUANTIZABLE:
            raise ValueError(f"batch norm {layer.name!r} does not follow a linear or conv layer")
        prev = layers[-1]
        t = {r: model.tensor(layer, r) for r in TENSOR_ROLES[LayerKind.BATCHNORM]}
        c, d = bn_coefficients(t["gamma"], t["beta"], t["mean"], t["var"], layer.attrs.get("eps", DEFAULT_BN_EPS))
        w = weights[prev.tensors["weight"]].astype(np.float64)
        if w.shape[prev.weight_axis] != len(c):
            raise ShapeError(f"batch norm {layer.name!r} has {len(c)} channels, {prev.name!r} has {w.shape[prev.weight_axis]}")
        shape = [1] * w.ndim
        shape[prev.weight_axis] = -1
        bias_name = prev.tensors.get("bias", f"{prev.name}.bias")
        b = weights[bias_name].astype(np.float64) if "bias" in prev.tensors else np.zeros(len(c))
        weights[prev.tensors["weight"]] = (w * c.reshape(shape)).astype(np.float32)
        weights[bias_name] = (c * b + d).astype(np.float32)
        layers[-1] = dataclasses.replace(
            prev, tensors={**prev.tensors, "bias": bias_name},
            quant=dataclasses.replace(prev.quant, weight_params=None))
    used = {n for l in layers for n in l.tensors.values()}
    return Model(tuple(layers), {k: v for k, v in weights.items() if k in used}, model.input_shape)


def quantize_weights(model: Model, per_channel: bool = True, bit_width: int = 8) -> Model:
    """Max-calibrated scale params for every quantizable layer's weight."""
    def update(layer: Layer) -> Layer:
        if not layer.quantizable:
            return layer
        w = model.tensor(layer, "weight")
        axis = layer.weight_axis if per_channel else None
        return layer.with_quant(weight_params=max_scale_params(w, bit_width, axis))
    return model.map_layers(update)


def replace_gelu(model: Model, limit: float = 10.0) -> Model:
    """Swap GELU for GELU clipped at ``limit`` so max calibration sees a bounded range."""
    return model.map_layers(
        lambda l: Layer(LayerKind.CLIPPED_GELU, l.name, attrs={"limit": float(limit)})
        if l.kind is LayerKind.GELU else l)
