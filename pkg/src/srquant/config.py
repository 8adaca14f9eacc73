"""Run configuration: documented defaults, key=value files, CLI overrides.

Precedence is command line > config file > defaults. Unknown keys are
rejected so typos never silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import SRModelConfig
from .training import LossConfig, TrainSchedule

__all__ = ["RunConfig", "parse_config_file", "load_run_config", "format_defaults"]


@dataclass
class RunConfig:
    # model architecture
    num_blocks: int = 2
    channels: int = 8
    scale: int = 4
    kernel: int = 3
    residual_scaling: float = 1.0
    use_bn: bool = False
    # quantization
    bits: int = 2
    percentile_j: float = 1.0
    track_weight_ranges: bool = True
    # distribution offsets
    offset_ratio: float = 0.3
    offset_bits: int = 4
    mismatch_patches: int = 8
    calibration_patches: int = 16
    # teacher pretraining
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    # quantization-aware training
    epochs: int = 6
    lr0: float = 1e-4
    halve_every: int = 2
    batch_size: int = 8
    lambda_skt: float = 1000.0
    lambda_v: float = 1e-4
    cooperative: bool = True
    variance_reg: bool = True
    optimizer: str = "sgd"  # "sgd" applies the sign rule on raw gradients; "adam_r" is an extension
    # data
    dataset: str = "synth"  # "synth" or "png"
    data_dir: str = ""
    patch_size: int = 48
    n_patches: int = 64
    n_eval_patches: int = 16
    downsample: str = "box"
    # run
    seed: int = 0
    out_dir: str = "runs"

    def model_config(self) -> SRModelConfig:
        return SRModelConfig(
            num_blocks=self.num_blocks,
            channels=self.channels,
            scale=self.scale,
            kernel=self.kernel,
            residual_scaling=self.residual_scaling,
            use_bn=self.use_bn,
        )

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs, lr0=self.lr0, halve_every=self.halve_every, batch_size=self.batch_size
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_skt=self.lambda_skt,
            lambda_v=self.lambda_v,
            cooperative=self.cooperative,
            variance_reg=self.variance_reg,
        )


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool" or kind is bool:
            lowered = raw.lower()
            if lowered in _BOOL_TRUE:
                return True
            if lowered in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def parse_config_file(path) -> dict:
    """Read UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    values: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_run_config(config_path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` override strings."""
    values: dict = {}
    if config_path:
        values.update(parse_config_file(config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def format_defaults() -> str:
    """One ``key = default`` line per config key, for --help output."""
    lines = ["config keys (key = default):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name} = {f.default}")
    return "\n".join(lines)
