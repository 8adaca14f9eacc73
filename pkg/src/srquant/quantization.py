"""Fake quantization with learnable clip ranges.

A value is clipped into [alpha_l, alpha_u], scaled onto the integer grid
[0, 2^b - 1], rounded, and rescaled, so the output always lies on the
uniform grid {alpha_l + k*s}. Rounding is not differentiable; gradients use
the straight-through rule: in-range values pass the upstream gradient to the
input, out-of-range gradient mass is routed to the clip bounds.

Activation ranges are learnable and initialized from feature percentiles.
Weight ranges are non-learnable percentiles of the weights themselves,
recomputed on every forward pass by default so the percentile property keeps
holding while training moves the weights.
"""

from __future__ import annotations

import warnings
from typing import Iterable, Optional

import numpy as np

from .autodiff import Parameter, Tensor, record_op
from .errors import ContractViolation, DimensionError, RangeCollapseError, UsageError

__all__ = [
    "QuantParams",
    "step_size",
    "value_grid",
    "fake_quantize",
    "ste_backward",
    "percentile_init",
    "quantize_weights",
    "WeightQuantizer",
    "MIN_RANGE_GAP",
]

# Lower bound kept between the clip bounds after every optimizer step so the
# derived step size stays positive.
MIN_RANGE_GAP = 1e-4

# The grid needs at least 2 levels; above 24 bits the scaled integers leave
# float32's exact range. Hardware-style settings restrict to {2, 3, 4, 8};
# the wide ceiling exists so tests can build effectively inert quantizers.
_MAX_BITS = 24


class QuantParams:
    """Clip bounds and bit-width for one fake-quantized tensor.

    The bounds live in a length-2 vector (lower, upper). For learnable
    activation ranges that vector is a :class:`Parameter` so backward can
    accumulate straight-through gradients into it.
    """

    def __init__(self, alpha_l: float, alpha_u: float, bits: int, learnable: bool = False, name: str = "quant"):
        if not 1 <= int(bits) <= _MAX_BITS:
            raise RangeCollapseError(f"bits must be in [1, {_MAX_BITS}], got {bits}")
        if not alpha_u > alpha_l:
            raise RangeCollapseError(f"alpha_u ({alpha_u}) must exceed alpha_l ({alpha_l})")
        self.bits = int(bits)
        self.learnable = bool(learnable)
        arr = np.array([alpha_l, alpha_u], dtype=np.float32)
        self.ranges: Tensor = Parameter(arr, name=name) if learnable else Tensor(arr)

    @property
    def alpha_l(self) -> float:
        return float(self.ranges.data[0])

    @property
    def alpha_u(self) -> float:
        return float(self.ranges.data[1])

    @property
    def levels(self) -> int:
        return 1 << self.bits

    def clamp_ranges(self, min_gap: float = MIN_RANGE_GAP) -> None:
        """Restore alpha_u >= alpha_l + min_gap by lifting alpha_u.

        Called after each optimizer step; learned bounds may otherwise cross
        and produce a negative step size.
        """
        lo, hi = self.ranges.data
        if hi < lo + min_gap:
            self.ranges.data[1] = lo + min_gap

    def __repr__(self) -> str:
        return (
            f"QuantParams(alpha_l={self.alpha_l:.6g}, alpha_u={self.alpha_u:.6g}, "
            f"bits={self.bits}, learnable={self.learnable})"
        )


def step_size(params: QuantParams) -> float:
    """Distance between adjacent grid values: (alpha_u - alpha_l) / (2^b - 1)."""
    lo, hi = params.alpha_l, params.alpha_u
    if not hi > lo:
        raise RangeCollapseError(f"range collapsed: alpha_l={lo}, alpha_u={hi}")
    return (hi - lo) / (params.levels - 1)


def value_grid(params: QuantParams) -> np.ndarray:
    """All 2^b representable values, ascending."""
    s = step_size(params)
    return (params.alpha_l + s * np.arange(params.levels)).astype(np.float32)


def ste_backward(
    upstream: np.ndarray, x: np.ndarray, alpha_l: float, alpha_u: float
) -> tuple[np.ndarray, float, float]:
    """Straight-through gradients for one fake-quantize application.

    Returns (grad_x, grad_alpha_l, grad_alpha_u): the upstream gradient
    passes through wherever alpha_l <= x <= alpha_u, gradient mass of values
    clipped below goes to the lower bound, mass of values clipped above to
    the upper bound.
    """
    inside = (x >= alpha_l) & (x <= alpha_u)
    grad_x = np.where(inside, upstream, 0.0).astype(np.float32)
    grad_lo = float(upstream[x < alpha_l].sum())
    grad_hi = float(upstream[x > alpha_u].sum())
    return grad_x, grad_lo, grad_hi


def _quantize_array(x: np.ndarray, alpha_l: float, alpha_u: float, s: float) -> np.ndarray:
    # Float64 internally: at large bit-widths the scaled integers exceed
    # what float32 addition keeps exact, and the error bound must hold.
    clipped = np.clip(x.astype(np.float64), alpha_l, alpha_u)
    # (clipped - alpha_l) / s is nonnegative, so rounding half away from zero
    # reduces to floor(t + 0.5).
    q = np.floor((clipped - alpha_l) / s + 0.5)
    return (q * s + alpha_l).astype(np.float32)


def fake_quantize(x: Tensor, params: QuantParams) -> Tensor:
    """Quantize onto the value grid of ``params``; gradients follow the STE.

    Idempotent, monotone, and within half a step of the clipped input.
    """
    if not np.all(np.isfinite(x.data)):
        raise ContractViolation("fake_quantize: non-finite input")
    lo, hi = params.alpha_l, params.alpha_u
    s = step_size(params)
    out = Tensor(_quantize_array(x.data, lo, hi, s))

    xd = x.data
    if params.learnable:
        ranges = params.ranges

        def vjp(g):
            gx, glo, ghi = ste_backward(g, xd, lo, hi)
            return gx, np.array([glo, ghi], dtype=np.float32)

        record_op(out, (x, ranges), vjp)
    else:

        def vjp(g):
            gx, _, _ = ste_backward(g, xd, lo, hi)
            return (gx,)

        record_op(out, (x,), vjp)
    return out


def _widened(lo: float, hi: float, what: str) -> tuple[float, float]:
    if hi > lo:
        return lo, hi
    eps = 1e-4 * max(1.0, abs(hi))
    warnings.warn(f"{what}: degenerate range at {hi:.6g}, widening by {eps:.3g}")
    return lo - eps, hi + eps


def percentile_init(samples: Iterable, j: float) -> tuple[float, float]:
    """Initial clip bounds from feature percentiles.

    For every calibration batch the j-th and (100 - j)-th percentile of the
    flattened feature are taken (linear interpolation between order
    statistics) and each side is averaged over batches.
    """
    if not 0.0 < j < 50.0:
        raise UsageError(f"percentile j must be in (0, 50), got {j}")
    lows: list[float] = []
    highs: list[float] = []
    for sample in samples:
        flat = (sample.data if isinstance(sample, Tensor) else np.asarray(sample)).ravel()
        if flat.size == 0:
            raise DimensionError("percentile_init: empty sample")
        lows.append(float(np.percentile(flat, j)))
        highs.append(float(np.percentile(flat, 100.0 - j)))
    if not lows:
        raise UsageError("percentile_init: needs at least one sample")
    lo = float(np.mean(lows))
    hi = float(np.mean(highs))
    return _widened(lo, hi, "percentile_init")


class WeightQuantizer:
    """Percentile-ranged fake quantization for convolution kernels.

    Ranges are fixed (non-learnable). With ``track=True`` they are recomputed
    from the current weights on every call so they follow the weights as
    training updates them; with ``track=False`` the ranges seen on the first
    call are frozen. An explicit ``ranges`` pair skips percentiles entirely
    (used to build effectively inert quantizers).
    """

    def __init__(self, bits: int, j: float = 1.0, track: bool = True,
                 ranges: Optional[tuple[float, float]] = None):
        if not 0.0 < j < 50.0:
            raise UsageError(f"percentile j must be in (0, 50), got {j}")
        self.bits = int(bits)
        self.j = float(j)
        self.track = bool(track)
        self._frozen: Optional[tuple[float, float]] = tuple(ranges) if ranges is not None else None

    def ranges_for(self, w: np.ndarray) -> tuple[float, float]:
        if self._frozen is not None:
            return self._frozen
        lo = float(np.percentile(w.ravel(), self.j))
        hi = float(np.percentile(w.ravel(), 100.0 - self.j))
        lo, hi = _widened(lo, hi, "weight quantizer")
        if not self.track:
            self._frozen = (lo, hi)
        return lo, hi

    def __call__(self, w: Tensor) -> Tensor:
        if w.size == 0:
            raise DimensionError("quantize_weights: empty kernel")
        lo, hi = self.ranges_for(w.data)
        params = QuantParams(lo, hi, self.bits, learnable=False)
        return fake_quantize(w, params)


def quantize_weights(w: Tensor, bits: int, j: float = 1.0) -> Tensor:
    """One-shot weight quantization at the current percentile range."""
    return WeightQuantizer(bits, j)(w)
