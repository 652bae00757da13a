"""Reconstruction quality metrics: PSNR and Gaussian-windowed SSIM.

SSIM uses the widely cited defaults: an 11x11 Gaussian window with standard
deviation 1.5 and stabilizers k1=0.01, k2=0.03, averaged over all window
positions fully inside the image. Volume evaluation quantizes to 8-bit
[0, 255] first so dB values are comparable across data sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Image2D, Volume3D, uint8_from_canonical

__all__ = ["SliceMetrics", "MetricReport", "psnr", "ssim", "evaluate_volume"]


@dataclass(frozen=True)
class SliceMetrics:
    slice_id: int
    axis: str
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class MetricReport:
    """Volume-level PSNR, mean per-slice SSIM, and the per-slice breakdown."""

    psnr_db: float
    ssim: float
    slices: list[SliceMetrics] = field(default_factory=list)


def _paired_arrays(x, y):
    a = x.data if isinstance(x, (Image2D, Volume3D)) else np.asarray(x, dtype=np.float64)
    b = y.data if isinstance(y, (Image2D, Volume3D)) else np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, y, max_value: float) -> float:
    """10 log10(max_value^2 / MSE); +inf when the inputs are identical."""
    if max_value <= 0.0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    a, b = _paired_arrays(x, y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(
    x,
    y,
    window: int = 11,
    max_value: float = 2.0,
    k1: float = 0.01,
    k2: float = 0.03,
    window_sigma: float = 1.5,
) -> float:
    """Mean local structural similarity over all fully interior windows."""
    a, b = _paired_arrays(x, y)
    if a.ndim != 2:
        raise ValueError("ssim is defined on 2-d images")
    if window < 2 or window > min(a.shape):
        raise ValueError(f"window {window} does not fit image of shape {a.shape}")
    if max_value <= 0.0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    kernel = _gaussian_window(window, window_sigma)
    win_a = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    win_b = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    axes = ([2, 3], [0, 1])
    mu_a = np.tensordot(win_a, kernel, axes=axes)
    mu_b = np.tensordot(win_b, kernel, axes=axes)
    var_a = np.tensordot(win_a * win_a, kernel, axes=axes) - mu_a * mu_a
    var_b = np.tensordot(win_b * win_b, kernel, axes=axes) - mu_b * mu_b
    cov = np.tensordot(win_a * win_b, kernel, axes=axes) - mu_a * mu_b
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def evaluate_volume(
    recon: Volume3D,
    truth: Volume3D,
    axis: str = "xz",
    window: int = 11,
    max_value: float = 255.0,
) -> MetricReport:
    """Per-slice PSNR/SSIM along the given axis.

    With the default max_value of 255 both volumes are quantized with the
    canonical-range mapping first, so dB values match the 8-bit convention;
    any other max_value evaluates the canonical floats directly.
    """
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    if axis not in ("xz", "yz"):
        raise ValueError(f"axis must be 'xz' or 'yz', got {axis!r}")
    if max_value == 255.0:
        a = uint8_from_canonical(recon.data).astype(np.float64)
        b = uint8_from_canonical(truth.data).astype(np.float64)
    else:
        a = recon.data
        b = truth.data
    planes = recon.height if axis == "xz" else recon.width
    rows = []
    for index in range(planes):
        sa = a[:, index, :] if axis == "xz" else a[:, :, index]
        sb = b[:, index, :] if axis == "xz" else b[:, :, index]
        rows.append(
            SliceMetrics(
                slice_id=index,
                axis=axis,
                psnr_db=psnr(sa, sb, max_value=max_value),
                ssim=ssim(sa, sb, window=window, max_value=max_value),
            )
        )
    volume_psnr = psnr(a, b, max_value=max_value)
    mean_ssim = float(np.mean([r.ssim for r in rows]))
    return MetricReport(psnr_db=volume_psnr, ssim=mean_ssim, slices=rows)
