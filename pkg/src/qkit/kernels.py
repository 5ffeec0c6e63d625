"""Integer-domain matrix kernels.

``integer_matmul_scale`` accumulates int8 products in int32 and applies one
real multiplier per output column. ``integer_matmul_affine`` handles
zero-points with the three-term split: the integer GEMM, a weight-only term
precomputed offline, and an online term that depends on the activations.
``matmul_dequant_reference`` is the dequantize-then-multiply ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from qkit.quant import QuantizedTensor, QuantParams, Scheme, dequantize, quantize, round_half_away

MAX_INNER_DIM = 2 ** 15
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


class GranularityError(ValueError):
    """Activation scales vary along the reduction dimension or across rows."""


@dataclass(frozen=True, eq=False)
class QLinearWeights:
    """Quantized ``p x n`` weight matrix with per-column (or one) scale."""

    wq: np.ndarray
    col_scales: np.ndarray
    zero_points: Optional[np.ndarray] = None

    def __post_init__(self):
        wq = np.asarray(self.wq)
        if wq.ndim != 2 or not np.issubdtype(wq.dtype, np.integer):
            raise ValueError("wq must be a 2-D integer array")
        if wq.size and (wq.min() < -128 or wq.max() > 127):
            raise ValueError("wq must hold 8-bit values")
        scales = np.atleast_1d(np.asarray(self.col_scales, dtype=np.float64))
        if scales.ndim != 1 or len(scales) not in (1, wq.shape[1]):
            raise ValueError(f"need 1 or {wq.shape[1]} column scales, got {scales.shape}")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("column scales must be finite and > 0")
        object.__setattr__(self, "wq", wq.astype(np.int8))
        object.__setattr__(self, "col_scales", scales)
        if self.zero_points is not None:
            zp = np.atleast_1d(np.asarray(self.zero_points))
            if len(zp) not in (1, wq.shape[1]) or np.any(zp != np.trunc(zp)):
                raise ValueError("zero_points must be integers, one per column")
            object.__setattr__(self, "zero_points", np.broadcast_to(zp.astype(np.int64), (wq.shape[1],)).copy())

    @property
    def shape(self) -> tuple[int, int]:
        return self.wq.shape

    @property
    def scales(self) -> np.ndarray:
        """Per-column scales, broadcast to length n."""
        return np.broadcast_to(self.col_scales, (self.wq.shape[1],))

    @classmethod
    def from_quantized(cls, w: QuantizedTensor) -> "QLinearWeights":
        """Wrap a quantized ``p x n`` tensor (per-tensor or axis=1)."""
        p = w.params
        if w.data.ndim != 2:
            raise ValueError("weights must be 2-D")
        if p.axis is not None and p.axis % 2 != 1:
            raise GranularityError("weight scales must be per-column (axis=1) or per-tensor")
        zp = None if p.scheme is Scheme.SCALE else np.atleast_1d(p.zero_point)
        return cls(w.data, np.atleast_1d(p.scale), zp)


@dataclass(frozen=True)
class AffineOfflineTerm:
    """Per-column int32 weight/zero-point term of the affine product."""

    values: np.ndarray
    z_x: int


@dataclass(frozen=True)
class OpCounts:
    """Integer operation counts for one affine product."""

    gemm_macs: int      # term 1
    offline_adds: int   # applying the precomputed term
    online_ops: int     # term 3: row sums plus the outer product with z_w

    @property
    def overhead_ratio(self) -> float:
        return self.online_ops / self.gemm_macs if self.gemm_macs else 0.0


def _as_int32(x: np.ndarray, what: str) -> np.ndarray:
    if x.size and (x.min() < INT32_MIN or x.max() > INT32_MAX):
        raise OverflowError(f"{what} does not fit in int32")
    return x.astype(np.int32)


def _int_gemm(xq: np.ndarray, wq: np.ndarray) -> np.ndarray:
    p = xq.shape[1]
    if p > MAX_INNER_DIM:
        raise ValueError("inner dimension too large")
    # |sum| <= p * 128 * 128 < 2^31 for p <= 2^15
    return np.matmul(xq.astype(np.int32), wq.astype(np.int32))


def _check_inner(m_by_p: tuple[int, ...], p_by_n: tuple[int, ...]) -> None:
    if len(m_by_p) != 2 or len(p_by_n) != 2 or m_by_p[1] != p_by_n[0]:
        raise ValueError(f"cannot multiply {m_by_p} by {p_by_n}")


def dequant_matmul(x_int, x_scale, w_int, w_scale, x_zero=0, w_zero=0) -> np.ndarray:
    """Dequantize each element with its own (broadcast) scale, then multiply in float64."""
    x_int = np.asarray(x_int)
    w_int = np.asarray(w_int)
    _check_inner(x_int.shape, w_int.shape)
    xr = (x_int.astype(np.float64) - np.asarray(x_zero, dtype=np.float64)) / np.asarray(x_scale, dtype=np.float64)
    wr = (w_int.astype(np.float64) - np.asarray(w_zero, dtype=np.float64)) / np.asarray(w_scale, dtype=np.float64)
    return xr @ wr


def matmul_dequant_reference(xq: QuantizedTensor, w: QLinearWeights) -> np.ndarray:
    """Ground truth: dequantize both operands, then a float64 matmul.

    Any activation granularity (per-tensor, per-row, per-column) is accepted.
    """
    _check_inner(xq.shape, w.shape)
    zw = 0 if w.zero_points is None else w.zero_points[None, :]
    wr = (w.wq.astype(np.float64) - zw) / w.scales[None, :]
    return dequantize(xq) @ wr


def _activation_scale(xq: QuantizedTensor) -> tuple[float, int]:
    if not xq.params.per_tensor:
        raise GranularityError("integer matmul needs a per-tensor activation scale")
    return xq.params.scale, xq.params.zero_point


def integer_matmul_scale(xq: QuantizedTensor, w: QLinearWeights) -> np.ndarray:
    """``(1 / (s_x * s_w[j])) * sum_k xq[i,k] * wq[k,j]`` with int32 accumulation."""
    _check_inner(xq.shape, w.shape)
    sx, zx = _activation_scale(xq)
    if zx != 0 or w.zero_points is not None and np.any(w.zero_points != 0):
        raise ValueError("scale kernel given non-zero zero-points; use integer_matmul_affine")
    acc = _int_gemm(xq.data, w.wq)
    return acc.astype(np.float64) * (1.0 / (sx * w.scales))[None, :]


def affine_offline_term(w: QLinearWeights, z_x: int, bias: Optional[np.ndarray] = None,
                        x_scale: Optional[float] = None) -> AffineOfflineTerm:
    """Weight-only term ``sum_k (wq[k,j] * z_x - z_x * z_w[j])``.

    With ``bias`` (and ``x_scale``) the bias is folded in as an int32 value at
    accumulator scale ``s_x * s_w[j]``, costing one rounding of at most half a step.
    """
    zw = np.zeros(w.shape[1], dtype=np.int64) if w.zero_points is None else w.zero_points
    p = w.shape[0]
    col = w.wq.astype(np.int64).sum(axis=0)
    term = z_x * col - p * z_x * zw
    if bias is not None:
        if x_scale is None:
            raise ValueError("folding a bias needs the activation scale")
        bias_q = round_half_away(np.asarray(bias, dtype=np.float64) * x_scale * w.scales).astype(np.int64)
        term = term - bias_q
    return AffineOfflineTerm(_as_int32(term, "offline term"), int(z_x))


def affine_terms(xq: np.ndarray, wq: np.ndarray, z_x: int, z_w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three integer terms (GEMM, offline, online) before scaling."""
    t1 = _int_gemm(xq, wq).astype(np.int64)
    p = xq.shape[1]
    t2 = z_x * wq.astype(np.int64).sum(axis=0) - p * z_x * np.asarray(z_w, dtype=np.int64)
    t3 = xq.astype(np.int64).sum(axis=1)[:, None] * np.asarray(z_w, dtype=np.int64)[None, :]
    return t1, t2, t3


def integer_matmul_affine(xq: QuantizedTensor, w: QLinearWeights, offline: AffineOfflineTerm,
                          with_counts: bool = False) -> Union[np.ndarray, tuple[np.ndarray, OpCounts]]:
    """Affine product: ``(term1 - term2 - term3) / (s_x * s_w[j])``.

    ``term2`` comes precomputed in ``offline`` (possibly with a folded bias);
    ``term3 = rowsum(xq)[i] * z_w[j]`` must be computed online.
    """
    _check_inner(xq.shape, w.shape)
    sx, zx = _activation_scale(xq)
    if offline.z_x != zx:
        raise ValueError(f"offline term built for z_x={offline.z_x}, activations have z_x={zx}")
    if offline.values.shape != (w.shape[1],):
        raise ValueError("offline term length does not match weight columns")
    zw = np.zeros(w.shape[1], dtype=np.int64) if w.zero_points is None else w.zero_points
    m, p = xq.shape
    n = w.shape[1]
    t1 = _int_gemm(xq.data, w.wq).astype(np.int64)
    rowsum = xq.data.astype(np.int64).sum(axis=1)
    t3 = rowsum[:, None] * zw[None, :]
    acc = t1 - offline.values.astype(np.int64)[None, :] - t3
    y = acc.astype(np.float64) * (1.0 / (sx * w.scales))[None, :]
    if not with_counts:
        return y
    return y, OpCounts(gemm_macs=m * p * n, offline_adds=m * n, online_ops=m * p + m * n)


# -- convolution -------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(h: int, w: int, kh: int, kw: int, stride=1, padding=0) -> tuple[int, int]:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError("kernel larger than padded input")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride=1, padding=0) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N*OH*OW, C*kh*kw)`` patch matrix (row-major over N, OH, OW)."""
    n, c, h, w = x.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh, ow = conv_output_size(h, w, kh, kw, stride, padding)
    img = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    col = np.zeros((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = img[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(col: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int, stride=1, padding=0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to an image."""
    n, c, h, w = x_shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh, ow = conv_output_size(h, w, kh, kw, stride, padding)
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=col.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += col[:, :, i, j]
    return img[:, :, ph:ph + h, pw:pw + w]


def conv2d_im2col(x, weight, stride=1, padding=0, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """2-D convolution (cross-correlation) lowered to a matrix multiply.

    ``x`` is NCHW and ``weight`` OIHW. When both are :class:`QuantizedTensor`
    (activation per-tensor, weights per-output-channel on axis 0) the product
    runs through :func:`integer_matmul_scale`; otherwise in float64.
    """
    quantized = isinstance(x, QuantizedTensor)
    if quantized != isinstance(weight, QuantizedTensor):
        raise TypeError("activation and weight must both be quantized or both real")
    xs = x.data if quantized else np.asarray(x, dtype=np.float64)
    ws = weight.data if quantized else np.asarray(weight, dtype=np.float64)
    if xs.ndim != 4 or ws.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weights")
    n, c, h, w = xs.shape
    o, ci, kh, kw = ws.shape
    if ci != c:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    oh, ow = conv_output_size(h, w, kh, kw, stride, padding)
    cols = im2col(xs, kh, kw, stride, padding)
    wmat = ws.reshape(o, -1).T
    if quantized:
        wp = weight.params
        if wp.scheme is not Scheme.SCALE:
            raise ValueError("quantized convolution requires scale-scheme weights")
        if wp.axis is not None and wp.axis % 4 != 0:
            raise GranularityError("conv weight scales must be per-output-channel (axis 0)")
        qcols = QuantizedTensor(cols, x.params)
        qw = QLinearWeights(wmat, np.atleast_1d(wp.scale))
        y = integer_matmul_scale(qcols, qw)
    else:
        y = cols @ wmat
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)[None, :]
    return y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)


def quantize_linear_weights(w: np.ndarray, params: QuantParams) -> QLinearWeights:
    """Quantize a real ``p x n`` weight with per-column (axis=1) scale params."""
    return QLinearWeights.from_quantized(quantize(w, params))
