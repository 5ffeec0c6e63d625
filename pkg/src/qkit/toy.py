"""Small fixed-seed models and datasets for tests, demos and the CLI."""

from __future__ import annotations

from typing import Optional

import numpy as np

from qkit.formats import Dataset
from qkit.graph import Layer, LayerKind, Model
from qkit.qat import TrainConfig, train

POISON_VALUE = 1.0e4


def make_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles, ``n // 2`` points each (labels 0 and 1)."""
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    a = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    b = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([a, b]) + rng.normal(0.0, noise, (n, 2))
    y = np.concatenate([np.zeros(n0, np.int32), np.ones(n1, np.int32)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order])


def build_mlp(sizes=(2, 64, 2), seed: int = 0, activation: LayerKind = LayerKind.RELU) -> Model:
    """Linear/activation stack with He-initialised weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers, weights = [], {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        name = f"fc{i + 1}"
        weights[f"{name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        weights[f"{name}.bias"] = np.zeros(fan_out)
        layers.append(Layer(LayerKind.LINEAR, name, {"weight": f"{name}.weight", "bias": f"{name}.bias"}))
        if i < len(sizes) - 2:
            layers.append(Layer(activation, f"act{i + 1}"))
    return Model(tuple(layers), weights, (sizes[0],))


def add_constant_feature(data: Dataset, value: float = POISON_VALUE) -> Dataset:
    return Dataset(np.concatenate([data.x, np.full((len(data), 1), value, np.float32)], axis=1), data.y)


def poison_first_layer(model: Model) -> Model:
    """Append an input feature with an all-zero weight row.

    Outputs are unchanged, but once the extra feature is a large constant the
    first layer's input range is dominated by it and its int8 grid can no
    longer resolve the real features.
    """
    first = model.quantizable_layers[0]
    w = model.tensor(first, "weight")
    weights = dict(model.weights)
    weights[first.tensors["weight"]] = np.concatenate([w, np.zeros((1, w.shape[1]), np.float32)])
    return Model(model.layers, weights, (model.input_shape[0] + 1,))


def make_toy(seed: int = 0, n_train: int = 1000, n_eval: int = 500, epochs: int = 60,
             poison: bool = False, config: Optional[TrainConfig] = None):
    """Train the 2x64x2 two-moons MLP in fp32.

    Returns ``(model, train_data, eval_data)``. With ``poison`` the model and
    both datasets gain the constant feature of :func:`poison_first_layer`.
    """
    train_data = make_moons(n_train, seed=seed)
    eval_data = make_moons(n_eval, seed=seed + 1)
    config = config or TrainConfig(epochs=epochs, lr=0.05, batch_size=32, seed=seed, quantize=False)
    model = train(build_mlp(seed=seed), train_data, config)
    if poison:
        model = poison_first_layer(model)
        train_data, eval_data = add_constant_feature(train_data), add_constant_feature(eval_data)
    return model, train_data, eval_data
