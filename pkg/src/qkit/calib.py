"""Activation statistics and range calibration (max, percentile, entropy).

Histograms record absolute values only, so every calibrator returns a
symmetric range suitable for scale quantization.
"""

from __future__ import annotations

import copy
import decimal
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from qkit.quant import RangeSpec

DEFAULT_BINS = 2048
KL_EPSILON = 1e-9
# relative slack when comparing KL values; within it the larger threshold wins
KL_TIE_RTOL = 1e-9
KL_TIE_ATOL = 1e-15

PERCENTILE_PRESETS = (0.999, 0.9999, 0.99999, 0.999999)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationMethod:
    kind: str  # "max" | "entropy" | "percentile"
    fraction: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("max", "entropy", "percentile"):
            raise ValueError(f"unknown calibration method {self.kind!r}")
        if self.kind == "percentile":
            if self.fraction is None or not 0.0 < self.fraction <= 1.0:
                raise ValueError("percentile fraction must lie in (0, 1]")
            if self.fraction == 1.0:  # full coverage is max calibration
                object.__setattr__(self, "kind", "max")
                object.__setattr__(self, "fraction", None)
        elif self.fraction is not None:
            raise ValueError(f"{self.kind} calibration takes no fraction")

    @classmethod
    def max(cls) -> "CalibrationMethod":
        return cls("max")

    @classmethod
    def entropy(cls) -> "CalibrationMethod":
        return cls("entropy")

    @classmethod
    def percentile(cls, fraction: float) -> "CalibrationMethod":
        return cls("percentile", float(fraction))

    @classmethod
    def parse(cls, text: str) -> "CalibrationMethod":
        """Accepts ``max``, ``entropy``, ``percentile(0.9999)`` and ``99.99%``."""
        text = text.strip().lower()
        if text in ("max", "entropy"):
            return cls(text)
        m = re.fullmatch(r"percentile\(([^)]+)\)", text)
        if m:
            return cls.percentile(float(m.group(1)))
        m = re.fullmatch(r"([0-9.]+)%", text)
        if m:
            return cls.percentile(float(decimal.Decimal(m.group(1)) / 100))
        raise ValueError(f"cannot parse calibration method {text!r}")

    def __str__(self) -> str:
        if self.kind == "percentile":
            return f"percentile({self.fraction!r})"
        return self.kind

    @property
    def label(self) -> str:
        if self.kind == "percentile":
            return f"{self.fraction * 100:.6g}%"
        return self.kind


DEFAULT_METHODS = (
    CalibrationMethod.max(),
    CalibrationMethod.entropy(),
    CalibrationMethod.percentile(0.9999),
    CalibrationMethod.percentile(0.99999),
)


class Histogram:
    """Fixed-bin histogram of |x| over ``[0, bin_upper_bound]``.

    The upper bound starts at the first non-zero max seen and grows by powers
    of two, merging adjacent bins, so counts are never redistributed
    fractionally.
    """

    def __init__(self, num_bins: int = DEFAULT_BINS):
        if num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        self.num_bins = int(num_bins)
        self.bin_upper_bound = 0.0
        self.counts = np.zeros(self.num_bins, dtype=np.int64)
        self.total_count = 0
        self.observed_max_abs = 0.0

    @classmethod
    def from_counts(cls, counts, bin_upper_bound: float, observed_max_abs: Optional[float] = None) -> "Histogram":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or np.any(counts < 0):
            raise ValueError("counts must be a 1-D non-negative array")
        h = cls(len(counts))
        h.counts = counts.copy()
        h.total_count = int(counts.sum())
        h.bin_upper_bound = float(bin_upper_bound)
        if observed_max_abs is None:
            nz = np.nonzero(counts)[0]
            observed_max_abs = h.edges[nz[-1]] if len(nz) else 0.0
        h.observed_max_abs = float(observed_max_abs)
        return h

    def copy(self) -> "Histogram":
        return copy.deepcopy(self)

    @property
    def bin_width(self) -> float:
        return self.bin_upper_bound / self.num_bins

    @property
    def edges(self) -> np.ndarray:
        """Upper edge of every bin."""
        return np.arange(1, self.num_bins + 1) * self.bin_upper_bound / self.num_bins

    def _widen(self, new_max: float) -> None:
        k, upper = 0, self.bin_upper_bound
        while upper < new_max:
            k += 1
            upper = math.ldexp(self.bin_upper_bound, k)
        if k == 0:
            return
        merged = np.zeros_like(self.counts)
        # any factor >= num_bins sends every old bin to bin 0
        np.add.at(merged, np.arange(self.num_bins) // min(1 << k, self.num_bins), self.counts)
        self.counts = merged
        self.bin_upper_bound = upper

    def _bin_index(self, a: np.ndarray) -> np.ndarray:
        if self.bin_upper_bound == 0.0:
            return np.zeros(a.shape, dtype=np.int64)
        idx = np.floor(a / self.bin_upper_bound * self.num_bins).astype(np.int64)
        return np.minimum(idx, self.num_bins - 1)

    def observe(self, x) -> "Histogram":
        """Add ``|x|`` to the histogram in place and return self."""
        a = np.abs(np.asarray(x, dtype=np.float64)).ravel()
        if a.size == 0:
            return self
        if not np.all(np.isfinite(a)):
            raise CalibrationError("non-finite activation")
        amax = float(a.max())
        if self.bin_upper_bound == 0.0:
            # only zeros so far, all sitting in bin 0 whatever the range
            self.bin_upper_bound = amax
        elif amax > self.bin_upper_bound:
            self._widen(amax)
        self.counts += np.bincount(self._bin_index(a), minlength=self.num_bins)
        self.total_count += a.size
        self.observed_max_abs = max(self.observed_max_abs, amax)
        return self

    def merge(self, other: "Histogram") -> "Histogram":
        """Combine two histograms into a new one.

        Exact when the ranges agree or differ by a power of two; otherwise each
        bin of the narrower histogram is placed by its centre.
        """
        if other.num_bins != self.num_bins:
            raise ValueError("cannot merge histograms with different bin counts")
        out = self.copy()
        if other.total_count == 0:
            return out
        if out.bin_upper_bound == 0.0:
            out.bin_upper_bound = other.bin_upper_bound
        elif other.bin_upper_bound > out.bin_upper_bound:
            out._widen(other.bin_upper_bound)
        if other.bin_upper_bound == out.bin_upper_bound:
            out.counts += other.counts
        else:
            ratio = out.bin_upper_bound / other.bin_upper_bound if other.bin_upper_bound else math.inf
            j = np.arange(other.num_bins)
            if ratio != math.inf and float(ratio).is_integer():
                target = j // min(int(ratio), other.num_bins)
            elif other.bin_upper_bound == 0.0:
                target = np.zeros_like(j)
            else:
                target = out._bin_index((j + 0.5) * other.bin_width)
            np.add.at(out.counts, target, other.counts)
        out.total_count += other.total_count
        out.observed_max_abs = max(out.observed_max_abs, other.observed_max_abs)
        return out

    def __repr__(self) -> str:
        return (f"Histogram(num_bins={self.num_bins}, upper={self.bin_upper_bound:g}, "
                f"total={self.total_count}, max={self.observed_max_abs:g})")


def histogram_observe(h: Histogram, x) -> Histogram:
    """Functional form of :meth:`Histogram.observe`; ``h`` is left untouched."""
    return h.copy().observe(x)


def _require_data(h: Histogram) -> None:
    if h.total_count == 0:
        raise CalibrationError("empty histogram")


def calibrate_max(h: Histogram) -> RangeSpec:
    _require_data(h)
    if h.observed_max_abs == 0.0:
        raise CalibrationError("degenerate tensor")
    return RangeSpec.symmetric(h.observed_max_abs)


def calibrate_percentile(h: Histogram, fraction: float) -> RangeSpec:
    """Smallest bin edge covering ``fraction`` of all observations.

    The edge is capped at the observed max, so ``fraction=1`` equals max calibration.
    """
    _require_data(h)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if h.observed_max_abs == 0.0:
        raise CalibrationError("degenerate tensor")
    covered = np.cumsum(h.counts) / h.total_count
    i = int(np.argmax(covered >= fraction))
    alpha = min(float(h.edges[i]), h.observed_max_abs)
    return RangeSpec.symmetric(alpha)


def kl_divergence_curve(counts, levels: int) -> tuple[np.ndarray, np.ndarray]:
    """KL(P||Q) for every candidate bin count ``i`` in ``[levels+1, len(counts)]``.

    P is the first ``i`` bins with the tail mass folded into bin ``i-1``. Q
    groups the raw (unfolded) first ``i`` bins into ``levels`` chunks, the last
    chunk absorbing the remainder, and spreads each chunk's mass evenly over
    the bins where P is non-zero. Zero entries of Q under non-zero P get
    ``KL_EPSILON`` mass. Returns ``(candidates, kl)``; ``kl`` is ``inf`` when Q
    is empty.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n = len(counts)
    candidates = np.arange(levels + 1, n + 1)
    kl = np.full(len(candidates), np.inf)
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1], [0.0]])
    for c, i in enumerate(candidates):
        raw = counts[:i]
        p = raw.copy()
        p[-1] += tail[i]
        chunk = i // levels
        starts = np.arange(levels) * chunk
        nonzero = p != 0
        mass = np.add.reduceat(raw, starts)
        support = np.add.reduceat(nonzero.astype(np.float64), starts)
        per_bin = np.divide(mass, support, out=np.zeros_like(mass), where=support > 0)
        chunk_of = np.minimum(np.arange(i) // chunk, levels - 1)
        q = np.where(nonzero, per_bin[chunk_of], 0.0)
        if q.sum() == 0:
            continue
        p = p / p.sum()
        q = q / q.sum()
        q[(q == 0) & nonzero] = KL_EPSILON
        kl[c] = float(np.sum(p[nonzero] * np.log(p[nonzero] / q[nonzero])))
    return candidates, kl


def pick_threshold(candidates: np.ndarray, kl: np.ndarray) -> int:
    """Largest candidate whose KL is within tie tolerance of the minimum."""
    best = float(np.min(kl))
    if not math.isfinite(best):
        return int(candidates[-1])
    ok = kl <= best * (1.0 + KL_TIE_RTOL) + KL_TIE_ATOL
    return int(candidates[np.nonzero(ok)[0][-1]])


def entropy_threshold_bin(counts, bit_width: int = 8) -> Optional[int]:
    """Number of leading bins kept by entropy calibration, or None if too few bins."""
    levels = 2 ** (bit_width - 1) - 1
    if len(counts) <= levels:
        return None
    candidates, kl = kl_divergence_curve(counts, levels)
    return pick_threshold(candidates, kl)


def calibrate_entropy(h: Histogram, bit_width: int = 8) -> RangeSpec:
    """Threshold minimising KL divergence between clipped and quantized distributions.

    Falls back to max calibration when the histogram has no more bins than
    quantization levels.
    """
    _require_data(h)
    if h.observed_max_abs == 0.0:
        raise CalibrationError("degenerate tensor")
    i = entropy_threshold_bin(h.counts, bit_width)
    if i is None:
        return calibrate_max(h)
    alpha = min(i * h.bin_upper_bound / h.num_bins, h.observed_max_abs)
    return RangeSpec.symmetric(alpha)


def calibrate(h: Histogram, method: CalibrationMethod, bit_width: int = 8) -> RangeSpec:
    if method.kind == "max":
        return calibrate_max(h)
    if method.kind == "entropy":
        return calibrate_entropy(h, bit_width)
    return calibrate_percentile(h, method.fraction)


# -- calibration cache -------------------------------------------------------

def float_to_hex(x: float) -> str:
    """IEEE-754 double bit pattern as 16 lowercase hex digits."""
    return struct.pack(">d", float(x)).hex()


def hex_to_float(text: str) -> float:
    if len(text) != 16:
        raise ValueError(f"expected 16 hex digits, got {text!r}")
    return struct.unpack(">d", bytes.fromhex(text))[0]


@dataclass(frozen=True)
class CacheEntry:
    tensor: str
    method: CalibrationMethod
    alpha: float


def format_cache(entries: Iterable[CacheEntry]) -> str:
    lines = []
    for e in entries:
        if ":" in e.tensor or "\n" in e.tensor:
            raise ValueError(f"tensor name {e.tensor!r} cannot be stored in a cache")
        lines.append(f"{e.tensor}: {e.method}: {float_to_hex(e.alpha)}\n")
    return "".join(lines)


def parse_cache(text: str) -> dict[str, CacheEntry]:
    out: dict[str, CacheEntry] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(": ")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected '<tensor>: <method>: <alpha_hex>'")
        name, method, alpha = parts
        out[name] = CacheEntry(name, CalibrationMethod.parse(method), hex_to_float(alpha.strip()))
    return out


def write_cache(path: Union[str, Path], entries: Iterable[CacheEntry]) -> None:
    Path(path).write_bytes(format_cache(entries).encode("utf-8"))


def read_cache(path: Union[str, Path]) -> dict[str, CacheEntry]:
    return parse_cache(Path(path).read_bytes().decode("utf-8"))
