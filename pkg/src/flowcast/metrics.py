"""Image quality metrics: PSNR and windowed SSIM."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Tensor
from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    window = np.outer(g1, g1)
    return window / window.sum()


_WINDOW = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _windowed(field: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local means over all valid window positions."""
    h, w = field.shape
    k = SSIM_WINDOW
    sh, sw = field.strides
    patches = as_strided(field, shape=(h - k + 1, w - k + 1, k, k), strides=(sh, sw, sh, sw))
    return np.tensordot(patches, _WINDOW, axes=([2, 3], [0, 1]))


def _ssim_single(a: np.ndarray, b: np.ndarray, max_value: float) -> float:
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    mu_a = _windowed(a)
    mu_b = _windowed(b)
    var_a = _windowed(a * a) - mu_a * mu_a
    var_b = _windowed(b * b) - mu_b * mu_b
    cov = _windowed(a * b) - mu_a * mu_b
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def ssim(a, b, max_value: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Accepts (H, W) or (C, H, W) inputs; channel scores are averaged.
    Requires both spatial extents to be at least the window size.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[1], a.shape[2]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    scores = [_ssim_single(a[c], b[c], max_value) for c in range(a.shape[0])]
    return float(np.mean(scores))
