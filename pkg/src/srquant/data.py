"""LR/HR patch pairs from PNG folders or a deterministic synthetic generator.

High-resolution patches are normalized to [0, 1]; the low-resolution side is
produced by exact box-filter downsampling (each LR pixel is the mean of its
scale x scale HR block), with bicubic available behind a flag for real data.
Streams are seeded and restartable; epoch ``e`` reshuffles with ``seed ^ e``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor
from .errors import ConfigError, DimensionError

__all__ = [
    "PatchPair",
    "box_downsample",
    "bicubic_downsample",
    "SyntheticPatches",
    "PngFolderPatches",
    "save_png",
    "load_png",
]


@dataclass
class PatchPair:
    """One batch of normalized LR/HR tensors, (B, 3, h, w) and (B, 3, h*s, w*s)."""

    lr: Tensor
    hr: Tensor


def box_downsample(hr: np.ndarray, scale: int) -> np.ndarray:
    """Average-pool by ``scale``; exact mean of each scale x scale block."""
    b, c, h, w = hr.shape
    if h % scale or w % scale:
        raise DimensionError(f"HR spatial size {(h, w)} not divisible by scale {scale}")
    blocks = hr.reshape(b, c, h // scale, scale, w // scale, scale)
    return blocks.mean(axis=(3, 5), dtype=np.float64).astype(np.float32)


def bicubic_downsample(hr: np.ndarray, scale: int) -> np.ndarray:
    b, c, h, w = hr.shape
    out = np.empty((b, c, h // scale, w // scale), dtype=np.float32)
    for i in range(b):
        img = np.clip(hr[i].transpose(1, 2, 0) * 255.0, 0, 255).astype(np.uint8)
        small = Image.fromarray(img).resize((w // scale, h // scale), Image.BICUBIC)
        out[i] = np.asarray(small, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return out


_DOWNSAMPLERS = {"box": box_downsample, "bicubic": bicubic_downsample}


def _synth_hr_patch(rng: np.random.Generator, size: int) -> np.ndarray:
    """One procedural HR patch with super-resolvable structure.

    Mixes oriented sinusoids below the LR Nyquist rate, sharp step edges
    (the main thing super-resolution can win on), and gently smoothed noise.
    Each channel gets its own gain and offset so channel statistics
    genuinely differ.
    """
    coords = np.arange(size, dtype=np.float32) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    structure = np.zeros((size, size), dtype=np.float32)
    for _ in range(rng.integers(2, 4)):
        freq = rng.uniform(1.0, 4.5)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.08, 0.2)
        structure += amp * np.sin(2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase).astype(
            np.float32
        )
    for _ in range(2):
        theta = rng.uniform(0.0, np.pi)
        cx, cy = rng.uniform(0.25, 0.75, size=2)
        edge = (np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)) > 0.0
        structure += rng.uniform(0.1, 0.25) * edge.astype(np.float32)

    patch = np.empty((3, size, size), dtype=np.float32)
    base = rng.uniform(0.3, 0.5)
    for ch in range(3):
        gain = rng.uniform(0.5, 1.6)
        offset = rng.uniform(-0.22, 0.22)
        noise = gaussian_filter(rng.standard_normal((size, size)), sigma=2.0)
        patch[ch] = base + gain * structure + offset + 0.02 * noise.astype(np.float32)
    return np.clip(patch, 0.0, 1.0)


class PatchStream:
    """Shared batching over a fixed array of LR/HR pairs."""

    n: int
    seed: int
    batch_size: int
    scale: int
    hr: np.ndarray
    lr: np.ndarray

    def batches(self, epoch: int = 0, batch_size: Optional[int] = None) -> Iterator[PatchPair]:
        bs = batch_size or self.batch_size
        order = np.random.default_rng(self.seed ^ epoch).permutation(self.n)
        for start in range(0, self.n, bs):
            idx = order[start : start + bs]
            yield PatchPair(lr=Tensor(self.lr[idx]), hr=Tensor(self.hr[idx]))

    def first_patches(self, k: int) -> list[PatchPair]:
        """The first ``k`` patches in epoch-0 order, split into batches."""
        out: list[PatchPair] = []
        remaining = k
        for pair in self.batches(epoch=0):
            if remaining <= 0:
                break
            take = min(remaining, pair.lr.shape[0])
            out.append(PatchPair(lr=Tensor(pair.lr.data[:take]), hr=Tensor(pair.hr.data[:take])))
            remaining -= take
        return out


class SyntheticPatches(PatchStream):
    """Seeded procedural dataset of ``n`` LR/HR pairs."""

    def __init__(self, n: int, scale: int, patch_size: int, seed: int, batch_size: int = 8,
                 downsample: str = "box"):
        if n < 1:
            raise ConfigError(f"need at least one patch, got n={n}")
        if patch_size % scale:
            raise ConfigError(f"patch_size {patch_size} not divisible by scale {scale}")
        if downsample not in _DOWNSAMPLERS:
            raise ConfigError(f"unknown downsample kernel {downsample!r}")
        self.n = n
        self.scale = scale
        self.seed = seed
        self.batch_size = batch_size
        hr = np.stack([_synth_hr_patch(np.random.default_rng((seed, i)), patch_size) for i in range(n)])
        self.hr = hr.astype(np.float32)
        self.lr = _DOWNSAMPLERS[downsample](self.hr, scale)


class PngFolderPatches(PatchStream):
    """Random HR crops from a folder of PNG images, box-downsampled to LR."""

    def __init__(self, directory, scale: int, patch_size: int, seed: int, n: int = 64,
                 batch_size: int = 8, downsample: str = "box"):
        if patch_size % scale:
            raise ConfigError(f"patch_size {patch_size} not divisible by scale {scale}")
        if downsample not in _DOWNSAMPLERS:
            raise ConfigError(f"unknown downsample kernel {downsample!r}")
        directory = Path(directory)
        images: list[np.ndarray] = []
        for path in sorted(directory.glob("*.png")):
            try:
                img = load_png(path)
            except Exception as exc:  # unreadable file: skip, keep going
                warnings.warn(f"skipping {path.name}: {exc}")
                continue
            if img.shape[1] < patch_size or img.shape[2] < patch_size:
                warnings.warn(f"skipping {path.name}: smaller than patch size {patch_size}")
                continue
            images.append(img)
        if not images:
            raise ConfigError(f"no usable PNG images in {directory}")
        rng = np.random.default_rng(seed)
        hr = np.empty((n, 3, patch_size, patch_size), dtype=np.float32)
        for i in range(n):
            img = images[rng.integers(len(images))]
            y = rng.integers(img.shape[1] - patch_size + 1)
            x = rng.integers(img.shape[2] - patch_size + 1)
            crop = img[:, y : y + patch_size, x : x + patch_size]
            if rng.random() < 0.5:
                crop = crop[:, :, ::-1]
            hr[i] = crop
        self.n = n
        self.scale = scale
        self.seed = seed
        self.batch_size = batch_size
        self.hr = hr
        self.lr = _DOWNSAMPLERS[downsample](hr, scale)


def load_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into a (3, H, W) float array in [0, 1]."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    return rgb.transpose(2, 0, 1) / 255.0


def save_png(path, image: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as an 8-bit RGB PNG."""
    arr = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")
