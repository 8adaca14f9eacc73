"""Miniature residual super-resolution network.

Topology: a full-precision head convolution, a body of residual blocks whose
convolutions are the quantized slots, a body-end convolution closing the
body, a global skip connection from the head output, a full-precision
pixel-shuffle upsampler, and a full-precision tail convolution back to RGB.
Only the body convolutions are ever fake-quantized; head, tail, upsampler,
and the skip path stay in float32.

The same class serves as the full-precision teacher (``quantized=False``,
all slots inert) and as the quantization-aware student.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .autodiff import Parameter, Tape, Tensor, backward
from .errors import ConfigError, ContractViolation, NumericError
from .mismatch import OffsetParams, OffsetPlan, apply_offsets
from .optim import Adam
from .quantization import QuantParams, WeightQuantizer, fake_quantize, percentile_init

__all__ = [
    "SRModelConfig",
    "QuantizedSlot",
    "ForwardResult",
    "SRModel",
    "build_model",
    "make_student",
    "pretrain_teacher",
]


@dataclass
class SRModelConfig:
    """Architecture knobs; the quantization settings live elsewhere."""

    num_blocks: int = 2
    channels: int = 8
    scale: int = 4
    kernel: int = 3
    residual_scaling: float = 1.0
    use_bn: bool = False

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if self.num_blocks < 1 or self.channels < 1:
            raise ConfigError("num_blocks and channels must be positive")
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")

    @property
    def num_slots(self) -> int:
        """Quantized convolutions: two per block plus the body-end conv."""
        return 2 * self.num_blocks + 1

    @property
    def upsample_stages(self) -> int:
        return self.scale // 2


@dataclass
class QuantizedSlot:
    """Per-layer quantization state for one body convolution."""

    layer_id: int
    act: QuantParams
    weights: WeightQuantizer
    shift: Optional[OffsetParams] = None
    scale: Optional[OffsetParams] = None


@dataclass
class ForwardResult:
    sr: Tensor
    taps: list[Tensor] = field(default_factory=list)
    structural: Optional[Tensor] = None


def _he_init(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in = c_in * k * k
    return (rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class SRModel:
    def __init__(
        self,
        config: SRModelConfig,
        quantized: bool = False,
        bits: int = 8,
        percentile_j: float = 1.0,
        track_weight_ranges: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        self.config = config
        self.quantized = bool(quantized)
        self.bits = int(bits)
        self.percentile_j = float(percentile_j)
        self.plan: OffsetPlan = OffsetPlan.empty()
        self._params: dict[str, Parameter] = {}
        rng = rng if rng is not None else np.random.default_rng(0)

        c = config.channels
        k = config.kernel
        self._add_conv(rng, "head", 3, c, k)
        for b in range(config.num_blocks):
            self._add_conv(rng, f"block{b}.conv1", c, c, k)
            self._add_conv(rng, f"block{b}.conv2", c, c, k)
            if config.use_bn:
                self._add_bn(f"block{b}.bn1", c)
                self._add_bn(f"block{b}.bn2", c)
        self._add_conv(rng, "body_end", c, c, k)
        for s in range(config.upsample_stages):
            self._add_conv(rng, f"up{s}", c, 4 * c, k)
        self._add_conv(rng, "tail", c, 3, k)

        self.slots: list[QuantizedSlot] = []
        if self.quantized:
            for i in range(config.num_slots):
                self.slots.append(
                    QuantizedSlot(
                        layer_id=i,
                        # Placeholder range; calibrate_act_ranges sets the real one.
                        act=QuantParams(-1.0, 1.0, self.bits, learnable=True, name=f"slot{i}.act_range"),
                        weights=WeightQuantizer(self.bits, percentile_j, track=track_weight_ranges),
                    )
                )

    # -- parameter bookkeeping ------------------------------------------------

    def _add_conv(self, rng, name: str, c_in: int, c_out: int, k: int) -> None:
        self._params[f"{name}.weight"] = Parameter(_he_init(rng, c_out, c_in, k), name=f"{name}.weight")
        self._params[f"{name}.bias"] = Parameter(np.zeros(c_out, dtype=np.float32), name=f"{name}.bias")

    def _add_bn(self, name: str, c: int) -> None:
        self._params[f"{name}.gamma"] = Parameter(np.ones(c, dtype=np.float32), name=f"{name}.gamma")
        self._params[f"{name}.beta"] = Parameter(np.zeros(c, dtype=np.float32), name=f"{name}.beta")

    def parameters(self) -> list[Parameter]:
        """Every trainable parameter: weights, biases, bn, ranges, offsets."""
        out = list(self._params.values())
        for slot in self.slots:
            if isinstance(slot.act.ranges, Parameter):
                out.append(slot.act.ranges)
            if slot.shift is not None:
                out.append(slot.shift.values)
            if slot.scale is not None:
                out.append(slot.scale.values)
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in tensors:
                raise ConfigError(f"checkpoint missing tensor {name}")
            if tensors[name].shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {p.data.shape}"
                )
            p.data[...] = tensors[name]

    # -- offsets and calibration ----------------------------------------------

    def attach_offsets(self, plan: OffsetPlan, bits: int = 4) -> None:
        """Create identity-initialized offset vectors for the planned layers."""
        if not self.quantized:
            raise ConfigError("offsets only apply to a quantized model")
        self.plan = plan
        c = self.config.channels
        for slot in self.slots:
            slot.shift = (
                OffsetParams("shift", c, bits, name=f"slot{slot.layer_id}.shift")
                if plan.wants_shift(slot.layer_id)
                else None
            )
            slot.scale = (
                OffsetParams("scale", c, bits, name=f"slot{slot.layer_id}.scale")
                if plan.wants_scale(slot.layer_id)
                else None
            )

    def calibrate_act_ranges(self, batches, j: Optional[float] = None) -> None:
        """Percentile-initialize every activation range from calibration batches.

        Features are captured at each slot's quantizer input with quantization
        disabled, so the ranges describe what the quantizer will actually see.
        """
        j = self.percentile_j if j is None else j
        per_slot: list[list[Tensor]] = [[] for _ in self.slots]
        for batch in batches:
            result = self.forward(batch, quantize=False)
            for i, tap in enumerate(result.taps):
                per_slot[i].append(tap)
        for slot, taps in zip(self.slots, per_slot):
            lo, hi = percentile_init(taps, j)
            slot.act.ranges.data[0] = lo
            slot.act.ranges.data[1] = hi

    # -- forward ---------------------------------------------------------------

    def _conv(self, name: str, x: Tensor, weight_override: Optional[Tensor] = None) -> Tensor:
        w = weight_override if weight_override is not None else self._params[f"{name}.weight"]
        return ops.conv2d(x, w, self._params[f"{name}.bias"], padding=self.config.kernel // 2)

    def _bn(self, name: str, x: Tensor) -> Tensor:
        # Batch statistics in train and eval alike; the desk-scale stand-in
        # does not keep running averages.
        mu = ops.channel_mean(x)
        sigma = ops.channel_std(x)
        centered = ops.broadcast_add_channel(x, ops.mul_scalar(mu, -1.0))
        normed = ops.broadcast_mul_channel(centered, ops.reciprocal(ops.add_scalar(sigma, 1e-5)))
        scaled = ops.broadcast_mul_channel(normed, self._params[f"{name}.gamma"])
        return ops.broadcast_add_channel(scaled, self._params[f"{name}.beta"])

    def _slot_conv(self, slot_idx: int, conv_name: str, x: Tensor, quantize: bool, taps: list[Tensor]) -> Tensor:
        if self.quantized:
            slot = self.slots[slot_idx]
            x = apply_offsets(x, self.plan, slot.layer_id, slot.shift, slot.scale)
            taps.append(x)
            if not np.all(np.isfinite(x.data)):
                raise ContractViolation(f"non-finite feature entering quantized layer {slot.layer_id}")
            if quantize:
                xq = fake_quantize(x, slot.act)
                wq = slot.weights(self._params[f"{conv_name}.weight"])
                return self._conv(conv_name, xq, weight_override=wq)
            return self._conv(conv_name, x)
        taps.append(x)
        return self._conv(conv_name, x)

    def forward(self, x: Tensor, quantize: Optional[bool] = None) -> ForwardResult:
        """Run the network; returns the SR output, per-slot quantizer-input
        features, and the structural feature (the body-end conv output)."""
        quantize = self.quantized if quantize is None else (quantize and self.quantized)
        taps: list[Tensor] = []
        cfg = self.config

        h = self._conv("head", x)
        skip = h
        slot = 0
        for b in range(cfg.num_blocks):
            r = self._slot_conv(slot, f"block{b}.conv1", h, quantize, taps)
            slot += 1
            if cfg.use_bn:
                r = self._bn(f"block{b}.bn1", r)
            r = ops.relu(r)
            r = self._slot_conv(slot, f"block{b}.conv2", r, quantize, taps)
            slot += 1
            if cfg.use_bn:
                r = self._bn(f"block{b}.bn2", r)
            if cfg.residual_scaling != 1.0:
                r = ops.mul_scalar(r, cfg.residual_scaling)
            h = ops.add(h, r)
        body = self._slot_conv(slot, "body_end", h, quantize, taps)
        structural = body
        h = ops.add(body, skip)
        for s in range(cfg.upsample_stages):
            h = ops.pixel_shuffle(self._conv(f"up{s}", h), 2)
        sr = self._conv("tail", h)
        return ForwardResult(sr=sr, taps=taps, structural=structural)


def build_model(
    config: SRModelConfig,
    quantized: bool,
    bits: int = 8,
    percentile_j: float = 1.0,
    track_weight_ranges: bool = True,
    seed: int = 0,
) -> SRModel:
    return SRModel(
        config,
        quantized=quantized,
        bits=bits,
        percentile_j=percentile_j,
        track_weight_ranges=track_weight_ranges,
        rng=np.random.default_rng(seed),
    )


def make_student(teacher: SRModel, bits: int, percentile_j: float = 1.0, track_weight_ranges: bool = True) -> SRModel:
    """Quantized copy of a pretrained teacher, weights shared by value."""
    student = SRModel(
        teacher.config,
        quantized=True,
        bits=bits,
        percentile_j=percentile_j,
        track_weight_ranges=track_weight_ranges,
    )
    student.load_tensors(teacher.named_tensors())
    return student


def pretrain_teacher(
    config: SRModelConfig,
    dataset,
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[SRModel, list[float]]:
    """Train the full-precision teacher with mean-absolute-error loss.

    Returns the model and the per-step loss history. Aborts on divergence.
    """
    model = build_model(config, quantized=False, seed=seed)
    adam = Adam(model.parameters(), lr=lr)
    losses: list[float] = []
    step = 0
    epoch = 0
    while step < steps:
        for batch in dataset.batches(epoch):
            if step >= steps:
                break
            with Tape() as tape:
                result = model.forward(batch.lr)
                diff = ops.absolute(ops.sub(result.sr, batch.hr))
                loss = ops.mean(diff)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"teacher pretraining diverged at step {step} (seed {seed})")
            backward(tape, loss)
            adam.step()
            adam.zero_grad()
            losses.append(value)
            step += 1
        epoch += 1
    return model, losses
