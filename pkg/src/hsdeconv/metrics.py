"""Restoration quality metrics: RMSE, PSNR, band-averaged SSIM, ERGAS.

The restored cube is clipped to [0, 1] before any metric; the reference is
used as-is. PSNR uses peak 1 on the normalized scale; RMSE is reported on the
0-255 scale (255 * sqrt(MSE)). ERGAS uses a resolution ratio of 1, which
affects absolute values: deconvolution has no scale change.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cube import SpectralCube
from .denoiser import ShapeMismatch

PSNR_SENTINEL = 999.0


@dataclass(frozen=True)
class MetricReport:
    rmse: float    # 0-255 scale
    psnr: float    # dB, peak 1 on the [0,1] scale
    ssim: float    # band-averaged, dynamic range 1
    ergas: float

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "psnr": self.psnr, "ssim": self.ssim, "ergas": self.ergas}


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size) - size // 2
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_band(a: np.ndarray, b: np.ndarray, window: np.ndarray,
              k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-band SSIM over valid window positions with a Gaussian window."""
    win = window.shape[0]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def wmean(img):
        view = sliding_window_view(img, (win, win))
        return np.einsum("mnij,ij->mn", view, window)

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a**2
    var_b = wmean(b * b) - mu_b**2
    cov = wmean(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
           ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


def _window_size(height: int, width: int, requested: int = 11) -> int:
    size = min(requested, height, width)
    if size % 2 == 0:
        size -= 1
    if size < 3:
        raise ShapeMismatch(f"spatial size {height}x{width} too small for SSIM")
    return size


def evaluate(x_hat: SpectralCube, x: SpectralCube) -> MetricReport:
    """All four metrics between a restored cube and its ground truth."""
    if x_hat.shape != x.shape:
        raise ShapeMismatch(f"shape {x_hat.shape} vs {x.shape}")
    est = np.clip(x_hat.data, 0.0, 1.0)
    ref = x.data
    err = est - ref

    mse = float(np.mean(err**2))
    rmse = 255.0 * np.sqrt(mse)
    psnr = PSNR_SENTINEL if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))

    window = gaussian_window(_window_size(x.height, x.width))
    # windowed variances cancel catastrophically on near-constant patches and
    # can push the score a few ulp past 1
    ssim = min(1.0, float(np.mean(
        [ssim_band(est[i], ref[i], window) for i in range(x.bands)])))

    band_mse = np.mean(err**2, axis=(1, 2))
    band_mean = np.mean(ref, axis=(1, 2))
    ergas = float(100.0 * np.sqrt(np.mean(band_mse / band_mean**2)))

    return MetricReport(rmse=rmse, psnr=psnr, ssim=ssim, ergas=ergas)


def psnr_only(x_hat: SpectralCube, x: SpectralCube) -> float:
    if x_hat.shape != x.shape:
        raise ShapeMismatch(f"shape {x_hat.shape} vs {x.shape}")
    mse = float(np.mean((np.clip(x_hat.data, 0.0, 1.0) - x.data) ** 2))
    return PSNR_SENTINEL if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))
