"""Binary checkpoint format.

Layout (little-endian throughout): magic bytes "ODMQ", a u32 format version,
a JSON config block, the named parameter tensors (u32 name length, name,
u32 rank, u32 dims, float32 payload), the per-layer quantization ranges
(i32 layer id, f32 lower, f32 upper, i32 bits), the offset plan, and the
offset vectors. Files are written atomically (temp file then rename) so an
interrupted run never leaves a truncated checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .mismatch import OffsetPlan
from .model import SRModel, SRModelConfig

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"ODMQ"
FORMAT_VERSION = 1

_KIND_CODE = {"shift": 0, "scale": 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ConfigError("corrupt checkpoint: truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)


def save_checkpoint(path, model: SRModel) -> None:
    parts: list[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION)]

    config = {
        "model": asdict(model.config),
        "quantized": model.quantized,
        "bits": model.bits,
        "percentile_j": model.percentile_j,
        "track_weight_ranges": all(s.weights.track for s in model.slots) if model.slots else True,
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)

    tensors = model.named_tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        parts.append(_pack_tensor(name, tensors[name]))

    parts.append(struct.pack("<I", len(model.slots)))
    for slot in model.slots:
        parts.append(struct.pack("<iffi", slot.layer_id, slot.act.alpha_l, slot.act.alpha_u, slot.act.bits))

    plan = model.plan
    has_plan = bool(plan.shift_layers or plan.scale_layers)
    parts.append(struct.pack("<B", 1 if has_plan else 0))
    offsets = []
    if has_plan:
        parts.append(struct.pack("<d", plan.p))
        parts.append(struct.pack(f"<I{len(plan.shift_layers)}i", len(plan.shift_layers), *plan.shift_layers))
        parts.append(struct.pack(f"<I{len(plan.scale_layers)}i", len(plan.scale_layers), *plan.scale_layers))
        for slot in model.slots:
            for off in (slot.shift, slot.scale):
                if off is not None:
                    offsets.append((slot.layer_id, off))
    parts.append(struct.pack("<I", len(offsets)))
    for layer_id, off in offsets:
        parts.append(struct.pack("<iBiI", layer_id, _KIND_CODE[off.kind], off.offset_bits, off.channels))
        parts.append(np.ascontiguousarray(off.values.data, dtype="<f4").tobytes())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> SRModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise ConfigError(f"{path}: bad magic bytes, not a checkpoint")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")

    config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    model = SRModel(
        SRModelConfig(**config["model"]),
        quantized=config["quantized"],
        bits=config["bits"],
        percentile_j=config["percentile_j"],
        track_weight_ranges=config["track_weight_ranges"],
    )

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = reader.floats(count).reshape(shape)
    model.load_tensors(tensors)

    n_quant = reader.u32()
    if n_quant != len(model.slots):
        raise ConfigError(f"{path}: {n_quant} quantization records for {len(model.slots)} slots")
    for _ in range(n_quant):
        layer_id = reader.i32()
        lo, hi, bits = reader.f32(), reader.f32(), reader.i32()
        slot = model.slots[layer_id]
        if bits != slot.act.bits:
            raise ConfigError(f"{path}: slot {layer_id} bit-width mismatch")
        slot.act.ranges.data[0] = lo
        slot.act.ranges.data[1] = hi

    if reader.u8():
        p = reader.f64()
        shift = tuple(reader.i32() for _ in range(reader.u32()))
        scale = tuple(reader.i32() for _ in range(reader.u32()))
        model.attach_offsets(OffsetPlan(shift, scale, p))
    n_offsets = reader.u32()
    for _ in range(n_offsets):
        layer_id = reader.i32()
        kind = _KIND_NAME[reader.u8()]
        bits = reader.i32()
        channels = reader.u32()
        values = reader.floats(channels)
        slot = model.slots[layer_id]
        off = slot.shift if kind == "shift" else slot.scale
        if off is None or off.offset_bits != bits or off.channels != channels:
            raise ConfigError(f"{path}: offset record for layer {layer_id} does not match the plan")
        off.values.data[...] = values
    return model
