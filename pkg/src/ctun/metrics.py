"""Image quality metrics and temporal profiles."""
from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak=255.0):
    """PSNR in dB; identical inputs return PSNR_CAP."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError("psnr", "inputs differ in shape", a.shape, b.shape)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse)))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    u = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(u * u) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable correlation keeping only fully-covered positions."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, peak=255.0):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    a, b = np.squeeze(_as_array(a)), np.squeeze(_as_array(b))
    if a.shape != b.shape:
        raise ShapeError("ssim", "inputs differ in shape", a.shape, b.shape)
    if a.ndim != 2:
        raise ShapeError("ssim", "expected a single-channel image", 2, a.ndim)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError("ssim", "image smaller than the SSIM window", SSIM_WINDOW, a.shape)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def temporal_profile(frames, row):
    """Stack row ``row`` of each frame: (1,3,N,W)."""
    frames = list(frames.frames if hasattr(frames, "frames") else frames)
    if not frames:
        raise ShapeError("temporal_profile", "no frames", ">= 1", 0)
    h = frames[0].shape[2]
    if not 0 <= row < h:
        raise ShapeError("temporal_profile", "row out of range", f"0..{h - 1}", row)
    strip = np.stack([f.data[0, :, row, :] for f in frames], axis=1)
    return Tensor(strip[None])
