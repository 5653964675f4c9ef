"""Synthetic speckle generation and full-reference quality metrics.

Speckle is the multiplicative model noisy = clean * (1 + eps) with eps
drawn i.i.d. Gaussian and the result clamped back to [0, 1]. Metrics are
PSNR with peak 1.0 (identical inputs report infinity), mean local SSIM
over an 11x11 Gaussian window, and GMSD: the standard deviation of the
Prewitt gradient-magnitude similarity map.

PSNR uses peak 1.0 because intensities are normalized; values are
identical to a peak-255 computation on the corresponding 8-bit data, since
the factor 255^2 cancels inside the log ratio.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import ImageBuffer

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

# GMSD stabilizer, stated for [0, 1] intensities; gradients are computed on
# the 255-scaled image per the metric's usual convention, so the constant is
# rescaled by 255^2 alongside them.
GMSD_C = 0.0026


@dataclass(frozen=True)
class NoiseConfig:
    """Speckle parameters: std of the multiplicative factor and the RNG seed."""

    sigma: float
    seed: int = 0
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.distribution != "gaussian":
            raise ValueError(f"unsupported noise distribution '{self.distribution}'")


@dataclass(frozen=True)
class QualityReport:
    """Full-reference scores for one denoising run."""

    psnr: float
    ssim: float
    gmsd: float

    def to_json(self) -> str:
        payload = {
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "ssim": self.ssim,
            "gmsd": self.gmsd,
        }
        return json.dumps(payload)


def add_speckle(img: ImageBuffer, cfg: NoiseConfig) -> ImageBuffer:
    """noisy = clamp(clean * (1 + eps), 0, 1), eps ~ N(0, sigma^2), seeded."""
    rng = np.random.default_rng(cfg.seed)
    eps = rng.normal(0.0, cfg.sigma, size=img.pixels.shape) if cfg.sigma > 0 else 0.0
    noisy = np.clip(img.pixels * (1.0 + eps), 0.0, 1.0)
    return ImageBuffer(noisy)


def _check_dims(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image dimensions differ: {a.width}x{a.height} "
                         f"vs {b.width}x{b.height}")


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; inf for identical inputs."""
    _check_dims(a, b)
    diff = a.pixels - b.pixels
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim_image(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5).

    Windows are taken in valid mode, so images must be at least 11x11;
    smaller blocks belong to the whole-patch SSIM in the fitting module.
    The value is exactly symmetric in its arguments.
    """
    _check_dims(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ValueError(f"ssim_image needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, "
                         f"got {a.width}x{a.height}; use ssim_block for small patches")
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    pa, pb = a.pixels, b.pixels

    def wmean(img: np.ndarray) -> np.ndarray:
        view = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.einsum("ijkl,kl->ij", view, window)

    mu_a = wmean(pa)
    mu_b = wmean(pb)
    var_a = wmean(pa * pa) - mu_a * mu_a
    var_b = wmean(pb * pb) - mu_b * mu_b
    cov = wmean(pa * pb) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _prewitt_magnitude(pixels: np.ndarray) -> np.ndarray:
    # 3x3 Prewitt on a symmetric 1-pixel pad keeps the map image-sized.
    p = np.pad(pixels, 1, mode="symmetric")
    col = p[:, :-2] - p[:, 2:]
    gx = (col[:-2] + col[1:-1] + col[2:]) / 3.0
    row = p[:-2, :] - p[2:, :]
    gy = (row[:, :-2] + row[:, 1:-1] + row[:, 2:]) / 3.0
    return np.hypot(gx, gy)


def gmsd(a: ImageBuffer, b: ImageBuffer) -> float:
    """Gradient-magnitude similarity deviation; 0 for identical images, lower
    is better."""
    _check_dims(a, b)
    if a.height < 3 or a.width < 3:
        raise ValueError(f"gmsd needs at least 3x3 pixels, got {a.width}x{a.height}")
    ma = _prewitt_magnitude(a.pixels * 255.0)
    mb = _prewitt_magnitude(b.pixels * 255.0)
    c = GMSD_C * 255.0 ** 2
    similarity = (2.0 * ma * mb + c) / (ma * ma + mb * mb + c)
    return float(np.std(similarity))


def compare(reference: ImageBuffer, candidate: ImageBuffer) -> QualityReport:
    """All three metrics of ``candidate`` against ``reference``."""
    return QualityReport(psnr=psnr(reference, candidate),
                         ssim=ssim_image(reference, candidate),
                         gmsd=gmsd(reference, candidate))
