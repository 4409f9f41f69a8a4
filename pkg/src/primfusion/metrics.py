"""Image quality metrics: PSNR (capped) and SSIM on luma."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(pred, target, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images report ``PSNR_CAP``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def mse_to_psnr(mse: float) -> float:
    return PSNR_CAP if mse <= 0 else min(PSNR_CAP, -10.0 * math.log10(mse))


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(pred, target, data_range: float = 1.0, sigma: float = 1.5, radius: int = 5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over an 11x11 Gaussian window, computed on luma."""
    x = to_luma(pred)
    y = to_luma(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")

    def blur(a):
        return gaussian_filter(a, sigma, mode="reflect", truncate=radius / sigma)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())
