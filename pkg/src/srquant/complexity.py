"""Storage and BitOPs accounting for the residual SR architecture.

Storage is the parameter count weighted by per-parameter precision, reported
in units of 1000 32-bit-parameter equivalents. BitOPs weight each operation
by the product of its two operand bit-widths: a multiply-accumulate counts
as 2 operations at weight_bits * activation_bits, so one full-precision MAC
contributes 2 * 32 * 32. Reported in units of 1e12 for one output image of a
given resolution.

Published low-bit accounting for this architecture treats the residual-block
convolutions as the quantized set and the body-end convolution as full
precision; ``preset_bits`` follows that convention (``quantize_body_end``
opts into counting the body-end conv at low bits as well). Skip-path
additions always count at full precision and channel offsets count one
elementwise operation per feature element at offset_bits x 32.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

from .errors import AccountingError
from .model import SRModelConfig

__all__ = [
    "ConvLayer",
    "LayerLine",
    "ComplexityReport",
    "conv_layers",
    "preset_bits",
    "storage_size",
    "bitops",
    "complexity_report",
    "render_table",
    "write_report_csv",
    "EDSR_BASELINE",
]

# Accounting configuration matching the reference full-size architecture.
EDSR_BASELINE = SRModelConfig(num_blocks=16, channels=64, scale=4)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    c_in: int
    c_out: int
    kernel: int
    spatial_mult: int  # conv output size relative to the LR input
    body_slot: bool  # True for the convolutions inside residual blocks


def conv_layers(config: SRModelConfig) -> list[ConvLayer]:
    c, k = config.channels, config.kernel
    layers = [ConvLayer("head", 3, c, k, 1, False)]
    for b in range(config.num_blocks):
        layers.append(ConvLayer(f"block{b}.conv1", c, c, k, 1, True))
        layers.append(ConvLayer(f"block{b}.conv2", c, c, k, 1, True))
    layers.append(ConvLayer("body_end", c, c, k, 1, False))
    for s in range(config.upsample_stages):
        layers.append(ConvLayer(f"up{s}", c, 4 * c, k, 2**s, False))
    layers.append(ConvLayer("tail", c, 3, k, config.scale, False))
    return layers


def preset_bits(
    config: SRModelConfig,
    bits: int,
    quantize_body_end: bool = False,
    offset_ratio: float = 0.0,
    offset_bits: int = 4,
) -> dict[str, int]:
    """Per-tensor bit assignment for a uniform low-bit configuration.

    Every conv contributes ``.weight``, ``.bias``, and ``.act`` entries;
    quantized convs additionally carry a 2-float ``.act_range``. With
    ``offset_ratio`` > 0, ceil(ratio * slots) offset vectors are added.
    """
    assignment: dict[str, int] = {}
    for layer in conv_layers(config):
        quantized = bits < 32 and (layer.body_slot or (quantize_body_end and layer.name == "body_end"))
        assignment[f"{layer.name}.weight"] = bits if quantized else 32
        assignment[f"{layer.name}.bias"] = 32
        assignment[f"{layer.name}.act"] = bits if quantized else 32
        if quantized:
            assignment[f"{layer.name}.act_range"] = 32
    if offset_ratio > 0.0:
        n_offsets = math.ceil(offset_ratio * config.num_slots)
        for i in range(n_offsets):
            assignment[f"offset{i}"] = offset_bits
    return assignment


_OFFSET_KEY = re.compile(r"^offset\d+$")


def _classify(config: SRModelConfig, assignment: Mapping[str, int]):
    """Split an assignment into conv entries and offset entries, validating
    that every tensor of the model is covered and no unknown key sneaks in."""
    layers = {layer.name: layer for layer in conv_layers(config)}
    offsets: dict[str, int] = {}
    for key in assignment:
        if _OFFSET_KEY.match(key):
            offsets[key] = assignment[key]
            continue
        base, _, kind = key.rpartition(".")
        if base not in layers or kind not in ("weight", "bias", "act", "act_range"):
            raise AccountingError(f"bit assignment names unknown tensor {key!r}")
    missing = [
        f"{name}.{kind}"
        for name in layers
        for kind in ("weight", "bias", "act")
        if f"{name}.{kind}" not in assignment
    ]
    if missing:
        raise AccountingError(f"bit assignment does not cover: {', '.join(missing)}")
    return layers, offsets


@dataclass
class LayerLine:
    name: str
    params: int
    storage_k: float
    macs: int
    bitops_t: float


@dataclass
class ComplexityReport:
    lines: list[LayerLine]

    @property
    def storage_k(self) -> float:
        return sum(line.storage_k for line in self.lines)

    @property
    def bitops_t(self) -> float:
        return sum(line.bitops_t for line in self.lines)


def complexity_report(
    config: SRModelConfig,
    assignment: Mapping[str, int],
    resolution: tuple[int, int] = (1920, 1080),
) -> ComplexityReport:
    """Per-layer storage and BitOPs for one output image of ``resolution`` (W, H)."""
    layers, offsets = _classify(config, assignment)
    out_w, out_h = resolution
    lr_w, lr_h = out_w // config.scale, out_h // config.scale
    lines: list[LayerLine] = []

    for layer in layers.values():
        w_count = layer.c_out * layer.c_in * layer.kernel**2
        b_count = layer.c_out
        w_bits = assignment[f"{layer.name}.weight"]
        a_bits = assignment[f"{layer.name}.act"]
        storage = w_count * w_bits + b_count * 32
        params = w_count + b_count
        if f"{layer.name}.act_range" in assignment:
            storage += 2 * assignment[f"{layer.name}.act_range"]
            params += 2
        h = lr_h * layer.spatial_mult
        w = lr_w * layer.spatial_mult
        macs = w_count * h * w
        ops = 2 * macs
        lines.append(LayerLine(layer.name, params, storage / 32.0 / 1000.0, macs, ops * w_bits * a_bits / 1e12))

    # Channel offsets: one add or multiply per feature element at the LR
    # resolution, weighted offset_bits x 32 (applied before the quantizer,
    # where the feature is still full precision).
    for key in sorted(offsets, key=lambda k: int(k[len("offset"):])):
        obits = offsets[key]
        count = config.channels
        elementwise = config.channels * lr_h * lr_w
        lines.append(
            LayerLine(key, count, count * obits / 32.0 / 1000.0, 0, elementwise * obits * 32 / 1e12)
        )

    # Residual additions (one per block, plus the global skip) stay full
    # precision; fully quantized skip paths are out of accounting scope.
    n_adds = (config.num_blocks + 1) * config.channels * lr_h * lr_w
    lines.append(LayerLine("skip_adds", 0, 0.0, 0, n_adds * 32 * 32 / 1e12))
    return ComplexityReport(lines)


def storage_size(config: SRModelConfig, assignment: Mapping[str, int]) -> float:
    """Total weighted storage in K (1000 32-bit-parameter equivalents)."""
    return complexity_report(config, assignment).storage_k


def bitops(config: SRModelConfig, assignment: Mapping[str, int], resolution: tuple[int, int]) -> float:
    """Total weighted operations in T (1e12) for one image of ``resolution``."""
    return complexity_report(config, assignment, resolution).bitops_t


def render_table(report: ComplexityReport) -> str:
    header = f"{'layer':<16} {'params':>10} {'storage_k':>12} {'macs':>16} {'bitops_t':>12}"
    rows = [header, "-" * len(header)]
    for line in report.lines:
        rows.append(
            f"{line.name:<16} {line.params:>10d} {line.storage_k:>12.4f} {line.macs:>16d} {line.bitops_t:>12.5f}"
        )
    rows.append("-" * len(header))
    rows.append(f"{'total':<16} {'':>10} {report.storage_k:>12.1f} {'':>16} {report.bitops_t:>12.1f}")
    return "\n".join(rows)


def write_report_csv(report: ComplexityReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("layer,params_k,storage_k,macs,bitops_t\n")
        for line in report.lines:
            fh.write(f"{line.name},{line.params / 1000.0:.6g},{line.storage_k:.6g},{line.macs},{line.bitops_t:.6g}\n")
