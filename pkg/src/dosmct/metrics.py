"""PSNR, SSIM and line profiles for quantitative comparisons.

SSIM uses the canonical parameters (11x11 Gaussian window, sigma=1.5,
K1=0.01, K2=0.03) and averages the local index over windows that fit fully
inside the images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

__all__ = ["MetricReport", "psnr", "ssim", "profile", "evaluate"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    data_range: float
    ssim_window: int = SSIM_WINDOW
    ssim_sigma: float = SSIM_SIGMA

    def as_row(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "data_range": self.data_range}


def _as_pair(a, b):
    av = np.asarray(getattr(a, "values", a), dtype=np.float64)
    bv = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    return av, bv


def psnr(a, b, data_range: float) -> float:
    """10*log10(range^2 / MSE); identical inputs report +inf."""
    av, bv = _as_pair(a, b)
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(win: int, sigma: float) -> np.ndarray:
    ax = np.arange(win, dtype=np.float64) - win // 2
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, data_range: float) -> float:
    """Mean local structural similarity over fully-interior windows."""
    av, bv = _as_pair(a, b)
    if min(av.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for ssim")
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    pad = SSIM_WINDOW // 2

    def local_mean(img):
        return correlate(img, kernel, mode="constant")[pad:-pad, pad:-pad]

    mu_a = local_mean(av)
    mu_b = local_mean(bv)
    var_a = local_mean(av * av) - mu_a * mu_a
    var_b = local_mean(bv * bv) - mu_b * mu_b
    cov = local_mean(av * bv) - mu_a * mu_b

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def profile(img, line: tuple[str, int]) -> np.ndarray:
    """Pixel values along a row or column: line = ('row'|'col', index)."""
    values = np.asarray(getattr(img, "values", img), dtype=np.float64)
    axis, index = line
    if axis == "row":
        if not 0 <= index < values.shape[0]:
            raise IndexError(f"row {index} outside image with {values.shape[0]} rows")
        return values[index, :].copy()
    if axis == "col":
        if not 0 <= index < values.shape[1]:
            raise IndexError(f"col {index} outside image with {values.shape[1]} columns")
        return values[:, index].copy()
    raise ValueError("line axis must be 'row' or 'col'")


def evaluate(recon, reference, data_range: float | None = None) -> MetricReport:
    """Metric report against a reference; range defaults to the reference's span."""
    refv = np.asarray(getattr(reference, "values", reference), dtype=np.float64)
    if data_range is None:
        data_range = float(refv.max() - refv.min())
        if data_range <= 0:
            data_range = 1.0
    return MetricReport(
        psnr=psnr(recon, reference, data_range),
        ssim=ssim(recon, reference, data_range),
        data_range=data_range,
    )
