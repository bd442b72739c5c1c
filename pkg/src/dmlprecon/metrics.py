"""Image-quality metrics on magnitude volumes."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .volume import ShapeError

SSIM_SIGMA = 1.5
SSIM_EXTENT = 7
K1, K2 = 0.01, 0.03


class UndefinedDataRange(ValueError):
    pass


class InfinitePSNR(ArithmeticError):
    pass


def gaussian_window_1d(sigma: float = SSIM_SIGMA, extent: int = SSIM_EXTENT) -> np.ndarray:
    r = np.arange(extent) - (extent - 1) / 2
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _local_mean(x: np.ndarray, w: np.ndarray, norm: np.ndarray) -> np.ndarray:
    out = x
    for ax in range(x.ndim):
        out = correlate1d(out, w, axis=ax, mode="constant", cval=0.0)
    return out / norm


def ssim(ref: np.ndarray, test: np.ndarray, sigma: float = SSIM_SIGMA, extent: int = SSIM_EXTENT) -> float:
    """Mean structural similarity with a separable Gaussian window.

    The window is truncated at the volume border and renormalized over the
    voxels it still covers. The data range is ``max(ref)``.
    """
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape:
        raise ShapeError(f"ssim: shapes differ {ref.shape} vs {test.shape}")
    data_range = float(ref.max())
    if data_range <= 0:
        raise UndefinedDataRange("undefined data range: reference maximum is not positive")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    w = gaussian_window_1d(sigma, extent)
    norm = _local_mean(np.ones_like(ref), w, 1.0)
    mu_x = _local_mean(ref, w, norm)
    mu_y = _local_mean(test, w, norm)
    sxx = _local_mean(ref * ref, w, norm) - mu_x**2
    syy = _local_mean(test * test, w, norm) - mu_y**2
    sxy = _local_mean(ref * test, w, norm) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """``20 log10(max(ref) / RMSE)`` in dB."""
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape:
        raise ShapeError(f"psnr: shapes differ {ref.shape} vs {test.shape}")
    peak = float(ref.max())
    if peak <= 0:
        raise UndefinedDataRange("undefined data range: reference maximum is not positive")
    rmse = float(np.sqrt(np.mean((ref - test) ** 2)))
    if rmse == 0:
        raise InfinitePSNR("infinite PSNR: inputs are identical")
    return 20 * np.log10(peak / rmse)
