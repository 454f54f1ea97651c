"""Image similarity (PSNR, SSIM) and the temporal background-stability metric."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak**2 / mse), PSNR_CAP))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    h = len(win) // 2
    return out[h : img.shape[0] - h, h : img.shape[1] - h]


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the channel-mean images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    win = _gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def background_stability(frames) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel temporal std (population), max over channels, plus sorted curve.

    Returns the (H, W) std image and the ascending per-pixel values, which
    read as a cumulative distribution when plotted against rank / N.
    """
    stack = np.asarray(frames, dtype=np.float64)
    if stack.shape[0] < 2:
        raise ValueError("need at least two frames")
    # shifting by the first frame leaves std unchanged but makes constant pixels exactly 0
    std = (stack - stack[0]).std(axis=0)
    if std.ndim == 3:
        std = std.max(axis=-1)
    return std, np.sort(std.ravel())
