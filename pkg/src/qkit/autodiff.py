"""A small reverse-mode autodiff engine over numpy arrays.

Each :class:`Tensor` holds a float64 value and, after :meth:`Tensor.backward`,
the gradient of the output with respect to it. Only what the models in this
package need is implemented.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from qkit import graph, kernels
from qkit.quant import QuantParams, fake_quantize, round_half_away


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad}{', ' + self.name if self.name else ''})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.value.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every tensor that requires grad."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


DualTensor = Tensor


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _node(value, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise and linear algebra -------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def square(a: Tensor) -> Tensor:
    return _node(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.value)
    return _node(v, (a,), lambda g: (g * v,))


def sum_all(a: Tensor) -> Tensor:
    return _node(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.value.shape),))


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    return _node(np.mean(a.value), (a,), lambda g: (np.broadcast_to(g / n, a.value.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.value.shape[0], -1))


# -- activations --------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    return _node(graph.gelu(a.value), (a,), lambda g: (g * graph.gelu_grad(a.value),))


def swish(a: Tensor) -> Tensor:
    return _node(graph.swish(a.value), (a,), lambda g: (g * graph.swish_grad(a.value),))


def clipped_gelu(a: Tensor, limit: float) -> Tensor:
    v = graph.gelu(a.value)
    active = v < limit
    return _node(np.minimum(v, limit), (a,), lambda g: (g * active * graph.gelu_grad(a.value),))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    idx = (np.arange(n), np.asarray(labels))
    loss = -logp[idx].mean()

    def back(g):
        d = np.exp(logp)
        d[idx] -= 1.0
        return (g * d / n,)

    return _node(loss, (logits,), back)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.value - np.asarray(target, dtype=np.float64).reshape(pred.value.shape)
    n = diff.size
    return _node(np.mean(diff ** 2), (pred,), lambda g: (g * 2.0 * diff / n,))


# -- layers -------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    n, c, h, wd = x.value.shape
    o, _, kh, kw = w.value.shape
    oh, ow = kernels.conv_output_size(h, wd, kh, kw, stride, padding)
    cols = kernels.im2col(x.value, kh, kw, stride, padding)
    wmat = w.value.reshape(o, -1).T
    y = (cols @ wmat).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (cols.T @ gm).T.reshape(w.value.shape)
        gx = kernels.col2im(gm @ wmat.T, x.value.shape, kh, kw, stride, padding)
        return gx, gw

    out = _node(y, (x, w), back)
    if b is None:
        return out
    return add(out, reshape(b, (1, -1, 1, 1)))


def channel_affine(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """Inference-mode batch norm ``c*x + d`` with fixed per-channel coefficients."""
    shape = (1, -1) + (1,) * (x.value.ndim - 2)
    return add(mul(x, scale.reshape(shape)), shift.reshape(shape))


# -- quantization -------------------------------------------------------------

def ste_mask(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """1 where ``beta <= x <= alpha``, else 0."""
    lo, hi = params.real_bounds(x.ndim)
    return ((x >= lo) & (x <= hi)).astype(np.float64)


def fake_quant(x: Tensor, params: QuantParams) -> Tensor:
    """Fake quantization forward; straight-through gradient inside the range, zero outside."""
    mask = ste_mask(x.value, params)
    return _node(fake_quantize(x.value, params), (x,), lambda g: (g * mask,))


def frozen_clip(x: Tensor, params: QuantParams, residual: np.ndarray) -> Tensor:
    """``clip(x, beta, alpha) + residual`` with a constant ``residual``.

    With ``residual = fake_quant(x0) - clip(x0)`` this matches fake
    quantization's value at ``x0`` and its straight-through derivative, while
    being differentiable in the ordinary sense, so finite differences apply.
    """
    lo, hi = params.real_bounds(x.value.ndim)
    mask = ((x.value >= lo) & (x.value <= hi)).astype(np.float64)
    return _node(np.clip(x.value, lo, hi) + residual, (x,), lambda g: (g * mask,))


def pact_fake_quant(x: Tensor, alpha: Tensor, bit_width: int = 8) -> Tensor:
    """Symmetric learned-range fake quantization.

    Forward clips to ``[-alpha, alpha]`` and snaps onto the grid with
    ``s = (2^(b-1) - 1)/alpha``. Backward: straight-through for ``x`` inside
    the range; ``d/d alpha`` is +1 above the range and -1 below it.
    """
    a = float(alpha.value)
    if not a > 0:
        raise ValueError("alpha must be > 0")
    qmax = 2 ** (bit_width - 1) - 1
    s = qmax / a
    clipped = np.clip(x.value, -a, a)
    out = np.clip(round_half_away(s * clipped), -qmax, qmax) / s
    above = x.value > a
    below = x.value < -a
    inside = ~(above | below)

    def back(g):
        return g * inside, np.sum(g * above) - np.sum(g * below)

    return _node(out, (x, alpha), back)


def pact_alpha_grad(x: np.ndarray, alpha: float, upstream: np.ndarray) -> float:
    """Gradient of the learned range for fixed inputs and upstream gradient."""
    t = Tensor(x)
    a = Tensor(np.float64(alpha), requires_grad=True)
    out = pact_fake_quant(t, a)
    out.backward(np.broadcast_to(np.asarray(upstream, dtype=np.float64), out.value.shape))
    return float(a.grad)
