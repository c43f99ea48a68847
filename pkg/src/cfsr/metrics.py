"""PSNR and SSIM on the luminance channel.

Both metrics quantize through 8 bits first (RGB to uint8, then the BT.601 Y
channel rounded to integer levels on the 0-255 scale), matching how benchmark
tables are produced from images saved to disk.  PSNR of identical inputs is
+infinity; aggregate means exclude such pairs with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import ImageBuffer, rgb_to_y
from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


@dataclass
class MetricResult:
    """Arithmetic means over a batch of image pairs."""

    psnr_db: float
    ssim: float
    n_images: int


def quantized_y(img: ImageBuffer) -> np.ndarray:
    """Y channel as integer-valued float64 levels on the 0-255 scale."""
    return np.rint(rgb_to_y(img.as_u8()).astype(np.float64) * 255.0)


def _shave(y: np.ndarray, border: int) -> np.ndarray:
    if border < 0:
        raise ShapeError(f"border must be >= 0, got {border}")
    if border == 0:
        return y
    if 2 * border >= min(y.shape):
        raise ShapeError(f"border {border} leaves no pixels on a {y.shape} image")
    return y[border:-border, border:-border]


def _check_dims(a: ImageBuffer, b: ImageBuffer) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(
            f"images differ in size: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def psnr_from_y(ya: np.ndarray, yb: np.ndarray) -> float:
    """PSNR in dB between two Y planes on the 0-255 scale (inf if identical)."""
    if ya.shape != yb.shape:
        raise ShapeError(f"Y planes differ in shape: {ya.shape} vs {yb.shape}")
    mse = float(np.mean((ya.astype(np.float64) - yb.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def psnr_y(a: ImageBuffer, b: ImageBuffer, border: int = 0) -> float:
    """PSNR on the quantized Y channel, shaving ``border`` pixels per side.

    The benchmark convention sets the border to the upscaling factor.
    """
    _check_dims(a, b)
    return psnr_from_y(_shave(quantized_y(a), border), _shave(quantized_y(b), border))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _window_filter(y: np.ndarray, win: np.ndarray) -> np.ndarray:
    """'valid' correlation of a 2-D plane with the window."""
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(y, (k, k))
    return np.einsum("hwuv,uv->hw", view, win, optimize=True)


def ssim_from_y(ya: np.ndarray, yb: np.ndarray) -> float:
    """Mean local SSIM between two Y planes on the 0-255 scale."""
    if ya.shape != yb.shape:
        raise ShapeError(f"Y planes differ in shape: {ya.shape} vs {yb.shape}")
    if min(ya.shape) < SSIM_WINDOW:
        raise ShapeError(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {ya.shape}"
        )
    ya = ya.astype(np.float64)
    yb = yb.astype(np.float64)
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _window_filter(ya, win)
    mu_b = _window_filter(yb, win)
    var_a = _window_filter(ya * ya, win) - mu_a * mu_a
    var_b = _window_filter(yb * yb, win) - mu_b * mu_b
    cov = _window_filter(ya * yb, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim_y(a: ImageBuffer, b: ImageBuffer, border: int = 0) -> float:
    """SSIM on the quantized Y channel (11x11 Gaussian window, sigma 1.5)."""
    _check_dims(a, b)
    return ssim_from_y(_shave(quantized_y(a), border), _shave(quantized_y(b), border))


def evaluate_pairs(
    pairs: list[tuple[str, ImageBuffer, ImageBuffer]], border: int = 0
) -> tuple[list[tuple[str, float, float]], MetricResult]:
    """Score (name, a, b) pairs; returns per-image rows and the aggregate.

    Infinite PSNR values (identical images) are excluded from the mean with a
    warning; their SSIM (exactly 1) still participates.
    """
    rows = []
    for name, a, b in pairs:
        rows.append((name, psnr_y(a, b, border), ssim_y(a, b, border)))
    finite = [p for _, p, _ in rows if math.isfinite(p)]
    if len(finite) < len(rows):
        warnings.warn(
            f"{len(rows) - len(finite)} identical image pair(s) excluded from mean PSNR"
        )
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    mean_ssim = float(np.mean([s for _, _, s in rows]))
    return rows, MetricResult(psnr_db=mean_psnr, ssim=mean_ssim, n_images=len(rows))
