"""Quantization-aware training loop with cooperative variance regularization.

Each step runs the teacher once for its structural feature, runs the student
once, and differentiates two losses over that single forward: the
reconstruction loss (mean absolute error plus a weighted structural feature
distance) fills ``grad_r``, the variance regularizer fills ``grad_v``. The
update then applies the variance gradient only on coordinates where its sign
agrees with the reconstruction gradient, so regularizing the feature spread
can never flip the reconstruction descent direction. The fraction of
coordinates where the two gradients fight is logged every step.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import ops
from .autodiff import Parameter, Tape, Tensor, backward
from .errors import ConfigError, NumericError, UsageError
from .mismatch import OffsetPlan
from .model import SRModel, make_student
from .quantization import QuantParams

__all__ = [
    "LossConfig",
    "TrainSchedule",
    "ConflictStats",
    "StepLog",
    "TrainResult",
    "l1_loss",
    "variance_loss",
    "reconstruction_loss",
    "cooperative_step",
    "train",
    "conflict_ratio_series",
    "write_telemetry_csv",
]


@dataclass
class LossConfig:
    lambda_skt: float = 1000.0
    lambda_v: float = 1e-4
    cooperative: bool = True
    variance_reg: bool = True

    def __post_init__(self):
        if self.lambda_skt < 0 or self.lambda_v < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class TrainSchedule:
    epochs: int = 6
    lr0: float = 1e-4
    halve_every: int = 2
    batch_size: int = 8

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * 0.5 ** (epoch // self.halve_every)


@dataclass
class ConflictStats:
    """Gradient-sign disagreement between the two losses for one step.

    The denominator counts coordinates where both gradients are nonzero; the
    numerator those where their product is negative.
    """

    step: int
    conflict_ratio: float
    params_total: int
    params_conflicting: int


@dataclass
class StepLog:
    step: int
    loss_r: float
    loss_v: float
    conflict_ratio: float
    lr: float


@dataclass
class TrainResult:
    model: SRModel
    telemetry: list[StepLog] = field(default_factory=list)
    conflicts: list[ConflictStats] = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    return ops.mean(ops.absolute(ops.sub(a, b)))


def variance_loss(taps: Iterable[Tensor], lambda_v: float) -> Tensor:
    """Weighted sum of each feature's population standard deviation."""
    taps = list(taps)
    if not taps:
        warnings.warn("variance_loss: no feature taps, returning 0")
        return Tensor(np.float32(0.0))
    total = ops.std(taps[0])
    for tap in taps[1:]:
        total = ops.add(total, ops.std(tap))
    return ops.mul_scalar(total, lambda_v)


def reconstruction_loss(
    sr: Tensor, hr: Tensor, student_struct: Tensor, teacher_struct: Tensor, lambda_skt: float
) -> Tensor:
    """Mean absolute error plus the weighted structural-feature distance.

    Structural features are compared by mean squared error after each sample
    is normalized by its own L2 norm; the teacher side carries no gradient.
    """
    if sr.shape != hr.shape:
        raise ConfigError(f"reconstruction_loss: sr shape {sr.shape} != hr shape {hr.shape}")
    if student_struct.shape != teacher_struct.shape:
        raise ConfigError(
            f"reconstruction_loss: structural shapes differ "
            f"{student_struct.shape} vs {teacher_struct.shape}"
        )
    loss = l1_loss(sr, hr)
    if lambda_skt != 0.0:
        ns = ops.normalize_l2_sample(student_struct)
        nt = ops.normalize_l2_sample(teacher_struct)
        diff = ops.sub(ns, nt)
        skt = ops.mean(ops.mul(diff, diff))
        loss = ops.add(loss, ops.mul_scalar(skt, lambda_skt))
    return loss


# ---------------------------------------------------------------------------
# the update rule


def cooperative_step(param: Parameter, lr: float, cooperative: bool = True) -> tuple[int, int]:
    """Apply one descent step from the two gradient buffers.

    Per coordinate: when ``cooperative`` and the two gradients have strictly
    opposite signs, only the reconstruction gradient is applied; otherwise
    (including either gradient being zero) both are summed. Returns
    (conflicting, both_nonzero) coordinate counts for telemetry.
    """
    if not param.grads_populated:
        raise UsageError(f"cooperative_step on {param.name!r}: gradient buffers not populated")
    gr, gv = param.grad_r, param.grad_v
    product = gr * gv
    conflict = product < 0.0
    if cooperative:
        step = gr + np.where(conflict, 0.0, gv)
    else:
        step = gr + gv
    param.data -= (np.float32(lr) * step).astype(np.float32)
    n_conflict = int(np.count_nonzero(conflict))
    n_both = int(np.count_nonzero((gr != 0.0) & (gv != 0.0)))
    return n_conflict, n_both


def _step_all(model: SRModel, lr: float, cooperative: bool) -> tuple[int, int]:
    conflicting = 0
    both = 0
    for p in model.parameters():
        c, b = cooperative_step(p, lr, cooperative)
        conflicting += c
        both += b
        p.zero_grad()
    for slot in model.slots:
        slot.act.clamp_ranges()
    return conflicting, both


# ---------------------------------------------------------------------------
# the loop


def train(
    teacher: SRModel,
    dataset,
    schedule: TrainSchedule,
    loss_config: LossConfig,
    plan: Optional[OffsetPlan] = None,
    seed: int = 0,
    bits: int = 2,
    percentile_j: float = 1.0,
    track_weight_ranges: bool = True,
    calibration_patches: int = 16,
    checkpoint_hook=None,
) -> TrainResult:
    """Quantization-aware training of a student initialized from the teacher.

    The offset plan must be computed beforehand (or omitted to train without
    offsets); activation ranges are percentile-initialized from the first
    calibration patches before the loop starts. ``checkpoint_hook``, when
    given, is called with the student after every epoch.
    """
    if dataset.n < 1:
        raise ConfigError("train: empty dataset")
    student = make_student(teacher, bits, percentile_j, track_weight_ranges)
    if plan is not None and (plan.shift_layers or plan.scale_layers):
        student.attach_offsets(plan)
    student.calibrate_act_ranges([pair.lr for pair in dataset.first_patches(calibration_patches)])

    telemetry: list[StepLog] = []
    conflicts: list[ConflictStats] = []
    step = 0
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for batch in dataset.batches(epoch, schedule.batch_size):
            teacher_out = teacher.forward(batch.lr)
            teacher_struct = Tensor(teacher_out.structural.data.copy())

            with Tape() as tape:
                out = student.forward(batch.lr)
                loss_r = reconstruction_loss(out.sr, batch.hr, out.structural, teacher_struct,
                                             loss_config.lambda_skt)
                if loss_config.variance_reg:
                    loss_v = variance_loss(out.taps, loss_config.lambda_v)
                else:
                    loss_v = Tensor(np.float32(0.0))

            r_value, v_value = loss_r.item(), loss_v.item()
            if not (np.isfinite(r_value) and np.isfinite(v_value)):
                raise NumericError(f"training loss diverged at step {step} (seed {seed})")

            backward(tape, loss_r, slot="r", retain=loss_config.variance_reg)
            if loss_config.variance_reg:
                backward(tape, loss_v, slot="v")

            n_conflict, n_both = _step_all(student, lr, loss_config.cooperative)
            ratio = n_conflict / n_both if n_both else 0.0
            telemetry.append(StepLog(step, r_value, v_value, ratio, lr))
            conflicts.append(ConflictStats(step, ratio, n_both, n_conflict))
            step += 1
        if checkpoint_hook is not None:
            checkpoint_hook(student, epoch)
    return TrainResult(model=student, telemetry=telemetry, conflicts=conflicts)


def conflict_ratio_series(telemetry: list[StepLog], conflicts: list[ConflictStats]) -> list[ConflictStats]:
    """Per-step conflict statistics in step order, ready for CSV export."""
    return sorted(conflicts, key=lambda c: c.step)


def write_telemetry_csv(path, telemetry: list[StepLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_r", "loss_v", "conflict_ratio", "lr"])
        for row in telemetry:
            writer.writerow([row.step, f"{row.loss_r:.8g}", f"{row.loss_v:.8g}",
                             f"{row.conflict_ratio:.8g}", f"{row.lr:.8g}"])
