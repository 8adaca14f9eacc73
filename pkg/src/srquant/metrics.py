"""Super-resolution quality metrics on the luminance channel.

Both metrics follow the usual SR evaluation protocol: images are converted
to full-range BT.601 luminance (0.299 R + 0.587 G + 0.114 B on [0, 255]
values) and a border of ``scale`` pixels is shaved before comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionError

__all__ = ["QualityScore", "luminance", "psnr", "ssim", "PSNR_CAP_DB"]

PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


@dataclass
class QualityScore:
    psnr_db: float
    ssim: float


def luminance(rgb255: np.ndarray) -> np.ndarray:
    """Y channel of a (3, H, W) image with values in [0, 255]."""
    if rgb255.ndim != 3 or rgb255.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got shape {rgb255.shape}")
    r, g, b = rgb255.astype(np.float64)
    return 0.299 * r + 0.587 * g + 0.114 * b


def _shave(y: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return y
    if y.shape[0] <= 2 * border or y.shape[1] <= 2 * border:
        raise DimensionError(f"image of shape {y.shape} too small to shave {border} pixels per side")
    return y[border:-border, border:-border]


def _to_y_pair(sr: np.ndarray, hr: np.ndarray, border: int) -> tuple[np.ndarray, np.ndarray]:
    if sr.shape != hr.shape:
        raise DimensionError(f"image shapes differ: {sr.shape} vs {hr.shape}")
    return _shave(luminance(sr), border), _shave(luminance(hr), border)


def psnr(sr: np.ndarray, hr: np.ndarray, border: int = 0) -> float:
    """20 log10(255 / RMSE) on the shaved Y channel, capped at 100 dB."""
    ys, yh = _to_y_pair(sr, hr, border)
    mse = float(np.mean((ys - yh) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * np.log10(255.0 / np.sqrt(mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(sr: np.ndarray, hr: np.ndarray, border: int = 0) -> float:
    """Single-scale structural similarity with an 11x11 Gaussian window.

    The map is evaluated at valid window positions only and averaged.
    """
    ys, yh = _to_y_pair(sr, hr, border)
    if ys.shape[0] < _SSIM_WINDOW or ys.shape[1] < _SSIM_WINDOW:
        raise DimensionError(f"image of shape {ys.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    w = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)

    mu_s = convolve2d(ys, w, mode="valid")
    mu_h = convolve2d(yh, w, mode="valid")
    mu_ss = mu_s * mu_s
    mu_hh = mu_h * mu_h
    mu_sh = mu_s * mu_h
    var_s = convolve2d(ys * ys, w, mode="valid") - mu_ss
    var_h = convolve2d(yh * yh, w, mode="valid") - mu_hh
    cov = convolve2d(ys * yh, w, mode="valid") - mu_sh

    num = (2.0 * mu_sh + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_ss + mu_hh + _SSIM_C1) * (var_s + var_h + _SSIM_C2)
    return float(np.mean(num / den))
