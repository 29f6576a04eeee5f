"""Image quality metrics: PSNR (whole-image and masked ROI) and 3D SSIM."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

SSIM_SIGMA = 1.5
SSIM_RADIUS = 3            # 7^3 Gaussian window
SSIM_C1 = 0.01 ** 2        # dynamic range 1
SSIM_C2 = 0.03 ** 2


def rescale_unit(v: np.ndarray) -> np.ndarray:
    """Per-volume linear rescale of [min, max] onto [0, 1]."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise ValueError("cannot rescale a constant volume")
    return (v - lo) / (hi - lo)


def psnr(y: np.ndarray, g: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) with MAX = 1; +inf when the volumes agree exactly.

    With ``mask``, the MSE runs over mask voxels only (ROI PSNR).
    """
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {g.shape}")
    if mask is not None:
        sel = np.asarray(mask).astype(bool)
        if sel.shape != y.shape:
            raise ValueError(f"mask shape {sel.shape} does not match {y.shape}")
        if not sel.any():
            raise ValueError("empty mask")
        diff = y[sel] - g[sel]
    else:
        diff = y - g
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _ssim_filter(v: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(v, sigma=SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA,
                                   mode="reflect")


def ssim(y: np.ndarray, g: np.ndarray) -> float:
    """Mean local SSIM with a Gaussian 7^3 window, sigma 1.5, range 1."""
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {g.shape}")
    if min(y.shape) < 2 * SSIM_RADIUS + 1:
        raise ValueError(f"volume {y.shape} smaller than the SSIM window")
    mu_y = _ssim_filter(y)
    mu_g = _ssim_filter(g)
    var_y = _ssim_filter(y * y) - mu_y * mu_y
    var_g = _ssim_filter(g * g) - mu_g * mu_g
    cov = _ssim_filter(y * g) - mu_y * mu_g
    num = (2 * mu_y * mu_g + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_y ** 2 + mu_g ** 2 + SSIM_C1) * (var_y + var_g + SSIM_C2)
    return float(np.mean(num / den))
