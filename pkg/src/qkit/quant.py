"""Range mapping primitives: quantize, dequantize and fake-quantize.

Two schemes are supported. ``Affine`` maps ``x -> s*x + z`` onto the full
signed b-bit range ``[-2^(b-1), 2^(b-1)-1]``. ``Scale`` maps ``x -> s*x`` onto
the symmetric range ``[-(2^(b-1)-1), 2^(b-1)-1]``; the most negative code is
never produced.

All arithmetic before rounding is float64. ``round`` is round-half-away-from-
zero everywhere in the package.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

MIN_BITS = 2
MAX_BITS = 8


class Scheme(enum.Enum):
    AFFINE = "affine"
    SCALE = "scale"


def round_half_away(x: ArrayLike) -> np.ndarray:
    """Round to nearest integer, ties away from zero.

    ``np.round`` rounds ties to even, and ``floor(|x| + 0.5)`` misrounds
    ``0.49999999999999994``; splitting off the (exact) fractional part avoids both.
    """
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


def clip(x: ArrayLike, lower: ArrayLike, upper: ArrayLike) -> ArrayLike:
    """Three-case clamp: ``lower`` below, ``upper`` above, identity between."""
    if np.any(np.asarray(lower) > np.asarray(upper)):
        raise ValueError("clip requires lower <= upper")
    if np.ndim(x) == 0 and np.ndim(lower) == 0 and np.ndim(upper) == 0:
        if x < lower:
            return lower
        if x > upper:
            return upper
        return x
    return np.minimum(np.maximum(x, lower), upper)


@dataclass(frozen=True)
class RangeSpec:
    """Representable real range ``[beta, alpha]``."""

    beta: float
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.beta) and math.isfinite(self.alpha)):
            raise ValueError("range bounds must be finite")
        if self.alpha == self.beta:
            raise ValueError("empty range")
        if self.beta > self.alpha:
            raise ValueError(f"inverted range [{self.beta}, {self.alpha}]")

    @classmethod
    def symmetric(cls, alpha: float) -> "RangeSpec":
        if not alpha > 0:
            raise ValueError("non-positive range")
        return cls(-float(alpha), float(alpha))

    @property
    def is_symmetric(self) -> bool:
        return self.beta == -self.alpha


def _check_bits(bit_width: int) -> None:
    if not (isinstance(bit_width, (int, np.integer)) and MIN_BITS <= bit_width <= MAX_BITS):
        raise ValueError(f"bit_width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bit_width!r}")


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Scale, zero-point and bit-width for one tensor.

    ``axis`` is None for per-tensor granularity. Otherwise ``scale`` and
    ``zero_point`` are 1-D arrays with one entry per slice along ``axis``.
    """

    scheme: Scheme
    bit_width: int
    scale: ArrayLike
    zero_point: ArrayLike = 0
    axis: Optional[int] = None

    def __post_init__(self):
        _check_bits(self.bit_width)
        scale = np.asarray(self.scale, dtype=np.float64)
        zp = np.asarray(self.zero_point, dtype=np.float64)
        if self.axis is None:
            if scale.ndim != 0:
                raise ValueError("per-tensor params need a scalar scale")
            object.__setattr__(self, "scale", float(scale))
        else:
            if scale.ndim != 1 or scale.size == 0:
                raise ValueError("per-axis params need a 1-D scale array")
            if zp.ndim == 0:
                zp = np.full(scale.shape, float(zp))
            if zp.shape != scale.shape:
                raise ValueError("zero_point and scale lengths differ")
            object.__setattr__(self, "scale", scale.copy())
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ValueError("scale must be finite and > 0")
        if np.any(zp != np.trunc(zp)):
            raise ValueError("zero_point must be an integer")
        if self.scheme is Scheme.SCALE:
            if np.any(zp != 0):
                raise ValueError("scale scheme requires zero_point == 0")
        elif np.any(zp < -(2 ** (self.bit_width - 1))) or np.any(zp > 2 ** (self.bit_width - 1) - 1):
            raise ValueError("zero_point outside the integer range")
        if self.axis is None:
            object.__setattr__(self, "zero_point", int(zp))
        else:
            object.__setattr__(self, "zero_point", zp.astype(np.int64))

    @property
    def qmin(self) -> int:
        if self.scheme is Scheme.SCALE:
            return -(2 ** (self.bit_width - 1)) + 1
        return -(2 ** (self.bit_width - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bit_width - 1) - 1

    @property
    def per_tensor(self) -> bool:
        return self.axis is None

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        """Scale and zero-point reshaped to broadcast against an ``ndim`` tensor."""
        if self.axis is None:
            return np.float64(self.scale), np.float64(self.zero_point)
        axis = self.axis % ndim
        shape = [1] * ndim
        shape[axis] = -1
        return (np.reshape(self.scale, shape),
                np.reshape(np.asarray(self.zero_point, dtype=np.float64), shape))

    def real_bounds(self, ndim: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Real values ``[beta, alpha]`` that map exactly onto ``qmin``/``qmax``."""
        s, z = self.broadcast(ndim)
        return (self.qmin - z) / s, (self.qmax - z) / s

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (self.scheme is other.scheme and self.bit_width == other.bit_width
                and self.axis == other.axis
                and np.array_equal(self.scale, other.scale)
                and np.array_equal(self.zero_point, other.zero_point))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise TypeError("quantized data must be integer")
        if data.size and (data.min() < self.params.qmin or data.max() > self.params.qmax):
            raise ValueError("quantized data outside the scheme's integer range")
        _check_axis(data.shape, self.params)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _check_axis(shape: tuple[int, ...], params: QuantParams) -> None:
    if params.axis is None:
        return
    ndim = len(shape)
    if not -ndim <= params.axis < ndim:
        raise ValueError(f"axis {params.axis} out of range for shape {shape}")
    if shape[params.axis] != len(params.scale):
        raise ValueError(f"{len(params.scale)} scales for extent {shape[params.axis]} along axis {params.axis}")


def affine_params(rng: RangeSpec, bit_width: int) -> QuantParams:
    """Affine params: ``s = (2^b - 1)/(alpha - beta)``, ``z = -round(beta*s) - 2^(b-1)``.

    Ranges that exclude zero are widened to include it, otherwise ``z`` would
    fall outside the integer range and zero would not be representable.
    """
    _check_bits(bit_width)
    beta, alpha = min(rng.beta, 0.0), max(rng.alpha, 0.0)
    if alpha == beta:
        raise ValueError("empty range")
    s = (2.0 ** bit_width - 1.0) / (alpha - beta)
    z = -round_half_away(beta * s) - 2 ** (bit_width - 1)
    return QuantParams(Scheme.AFFINE, bit_width, s, int(z))


def scale_params(alpha: ArrayLike, bit_width: int, axis: Optional[int] = None) -> QuantParams:
    """Symmetric scale params ``s = (2^(b-1) - 1)/alpha``.

    ``alpha`` may be an array together with ``axis`` for per-channel weights.
    """
    _check_bits(bit_width)
    a = np.asarray(alpha, dtype=np.float64)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("non-positive range")
    s = (2.0 ** (bit_width - 1) - 1.0) / a
    if axis is None:
        if a.ndim != 0:
            raise ValueError("array alpha needs an axis")
        return QuantParams(Scheme.SCALE, bit_width, float(s))
    return QuantParams(Scheme.SCALE, bit_width, np.atleast_1d(s), 0, axis)


def max_scale_params(x: np.ndarray, bit_width: int = 8, axis: Optional[int] = None) -> QuantParams:
    """Max-calibrated scale params for a weight tensor.

    With ``axis`` set, one alpha per slice (per-channel/per-column).
    All-zero slices get alpha = 1 so their scale stays finite; they quantize to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        amax = float(np.max(np.abs(x))) if x.size else 0.0
        return scale_params(amax if amax > 0 else 1.0, bit_width)
    axis = axis % x.ndim
    reduce = tuple(i for i in range(x.ndim) if i != axis)
    amax = np.max(np.abs(x), axis=reduce)
    amax = np.where(amax > 0, amax, 1.0)
    return scale_params(amax, bit_width, axis)


def quantize(x: ArrayLike, params: QuantParams) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    _check_axis(x.shape, params)
    s, z = params.broadcast(x.ndim)
    q = np.clip(round_half_away(s * x + z), params.qmin, params.qmax)
    return QuantizedTensor(q.astype(np.int8), params)


def dequantize(xq: QuantizedTensor) -> np.ndarray:
    s, z = xq.params.broadcast(xq.data.ndim)
    return (xq.data.astype(np.float64) - z) / s


def fake_quantize(x: ArrayLike, params: QuantParams) -> np.ndarray:
    """``dequantize(quantize(x))``: snaps x onto the representable grid."""
    return dequantize(quantize(x, params))
