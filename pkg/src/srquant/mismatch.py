"""Distribution-mismatch analysis and channel-wise distribution offsets.

A layer whose per-channel means spread widely is a candidate for a learnable
channel shift; one whose per-channel spreads diverge is a candidate for a
channel scale. Both indicators are measured once on the full-precision
teacher, the most affected layers are selected by ratio, and the chosen
layers receive learnable offset vectors that are themselves 4-bit quantized
before every application.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Parameter, Tensor
from .errors import ConfigError, DimensionError, UsageError
from .ops import broadcast_add_channel, broadcast_mul_channel
from .quantization import QuantParams, fake_quantize

__all__ = [
    "LayerMismatch",
    "OffsetPlan",
    "OffsetParams",
    "mismatch_scalar",
    "mismatch_indicators",
    "collect_mismatch",
    "select_offset_layers",
    "apply_offsets",
    "shift_grid",
    "scale_grid",
    "OFFSET_BITS",
]

OFFSET_BITS = 4


def _population_std(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def mismatch_scalar(x: Tensor) -> float:
    """Overall mismatch of one feature: its population standard deviation."""
    if x.size == 0:
        raise DimensionError("mismatch_scalar: empty tensor")
    return _population_std(x.data.astype(np.float64))


@dataclass(frozen=True)
class LayerMismatch:
    """Channel-level mismatch indicators for one quantized layer."""

    layer_id: int
    m_mu: float  # spread of the per-channel means
    m_sigma: float  # spread of the per-channel stds


def mismatch_indicators(x: Tensor, layer_id: int = 0) -> LayerMismatch:
    """Measure how unevenly channel statistics are distributed.

    ``m_mu`` is the population std over channels of the per-channel means;
    ``m_sigma`` the same over the per-channel stds. Channel statistics
    aggregate over batch and both spatial axes.
    """
    if x.ndim != 4:
        raise DimensionError(f"mismatch_indicators: expected (B, C, H, W), got shape {x.shape}")
    c = x.shape[1]
    if c < 2:
        warnings.warn("mismatch_indicators: single-channel feature, indicators defined as 0")
        return LayerMismatch(layer_id, 0.0, 0.0)
    data = x.data.astype(np.float64)
    means = data.mean(axis=(0, 2, 3))
    centered = data - means.reshape(1, c, 1, 1)
    stds = np.sqrt((centered * centered).mean(axis=(0, 2, 3)))
    return LayerMismatch(layer_id, _population_std(means), _population_std(stds))


def collect_mismatch(pretrained, calibration_batch: Tensor) -> list[LayerMismatch]:
    """Indicators for every quantized layer of a model, in layer order.

    Runs one forward pass of the full-precision network and measures each
    layer's input feature at the position where quantization will happen.
    """
    result = pretrained.forward(calibration_batch, quantize=False)
    if not result.taps:
        warnings.warn("collect_mismatch: model has no quantized layers")
        return []
    return [mismatch_indicators(tap, layer_id=i) for i, tap in enumerate(result.taps)]


@dataclass(frozen=True)
class OffsetPlan:
    """Which layers receive shift and scale offsets; frozen before training."""

    shift_layers: tuple[int, ...]
    scale_layers: tuple[int, ...]
    p: float

    def wants_shift(self, layer_id: int) -> bool:
        return layer_id in self.shift_layers

    def wants_scale(self, layer_id: int) -> bool:
        return layer_id in self.scale_layers

    @staticmethod
    def empty() -> "OffsetPlan":
        return OffsetPlan((), (), 0.0)


def _top_k(reports: Sequence[LayerMismatch], key, k: int) -> tuple[int, ...]:
    # Equal values resolve to the lower layer index for determinism.
    ranked = sorted(reports, key=lambda r: (-key(r), r.layer_id))
    return tuple(sorted(r.layer_id for r in ranked[:k]))


def select_offset_layers(reports: Sequence[LayerMismatch], p: float) -> OffsetPlan:
    """Pick the ceil(p * L) layers with the largest indicators.

    Shift candidates rank by ``m_mu``, scale candidates by ``m_sigma``; a
    layer may appear in both sets.
    """
    if not reports:
        raise UsageError("select_offset_layers: no mismatch reports")
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"offset ratio p must be in (0, 1], got {p}")
    k = math.ceil(p * len(reports))
    return OffsetPlan(
        shift_layers=_top_k(reports, lambda r: r.m_mu, k),
        scale_layers=_top_k(reports, lambda r: r.m_sigma, k),
        p=p,
    )


# Fixed 4-bit grids for the offsets themselves. A 16-level uniform grid over
# a symmetric-about-identity interval has no midpoint, so the intervals keep
# width 2 and step 2/15 but sit half a step off center, putting the identity
# values 0 (shift) and 1 (scale) exactly on-grid.


def shift_grid(bits: int = OFFSET_BITS) -> QuantParams:
    steps = (1 << bits) - 1
    step = 2.0 / steps
    return QuantParams(-(steps // 2 + 1) * step, (steps // 2) * step, bits)


def scale_grid(bits: int = OFFSET_BITS) -> QuantParams:
    steps = (1 << bits) - 1
    step = 2.0 / steps
    return QuantParams(1.0 - (steps // 2) * step, 1.0 + (steps // 2 + 1) * step, bits)


class OffsetParams:
    """A learnable per-channel shift or scale vector, 4-bit quantized in use.

    Shift vectors start at 0 and scale vectors at 1 so a freshly attached
    offset is the identity.
    """

    KINDS = ("shift", "scale")

    def __init__(self, kind: str, channels: int, bits: int = OFFSET_BITS, name: str = ""):
        if kind not in self.KINDS:
            raise ConfigError(f"offset kind must be one of {self.KINDS}, got {kind!r}")
        self.kind = kind
        self.offset_bits = int(bits)
        init = 0.0 if kind == "shift" else 1.0
        self.values = Parameter(np.full(channels, init, dtype=np.float32), name=name or f"offset_{kind}")
        self.grid = shift_grid(bits) if kind == "shift" else scale_grid(bits)

    @property
    def channels(self) -> int:
        return self.values.size

    def quantized(self) -> Tensor:
        """The vector as applied: snapped to its low-bit grid (STE gradient)."""
        return fake_quantize(self.values, self.grid)


def apply_offsets(
    x: Tensor,
    plan: OffsetPlan,
    layer_id: int,
    shift: Optional[OffsetParams] = None,
    scale: Optional[OffsetParams] = None,
) -> Tensor:
    """Offset a feature according to the plan, ahead of its quantizer.

    Scale is applied before shift when a layer holds both, the affine
    convention x * S + T. Offsets handed in for a layer the plan does not
    select are a configuration error.
    """
    wants_shift = plan.wants_shift(layer_id)
    wants_scale = plan.wants_scale(layer_id)
    if shift is not None and not wants_shift:
        raise ConfigError(f"layer {layer_id} is not in the shift set but got a shift offset")
    if scale is not None and not wants_scale:
        raise ConfigError(f"layer {layer_id} is not in the scale set but got a scale offset")
    if wants_scale:
        if scale is None:
            raise ConfigError(f"layer {layer_id} is in the scale set but got no scale offset")
        x = broadcast_mul_channel(x, scale.quantized())
    if wants_shift:
        if shift is None:
            raise ConfigError(f"layer {layer_id} is in the shift set but got no shift offset")
        x = broadcast_add_channel(x, shift.quantized())
    return x
