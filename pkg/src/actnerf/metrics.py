"""Image-quality metrics on float images in [0, 1]."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` in dB; identical images report ``PSNR_CAP``."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, max(0.0, -10.0 * np.log10(mse))))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D image with window ``g``."""
    k = g.size
    h, w = img.shape
    rows = np.stack([img[:, j:j + w - k + 1] for j in range(k)], 0)
    tmp = np.tensordot(g, rows, axes=(0, 0))
    cols = np.stack([tmp[i:i + h - k + 1, :] for i in range(k)], 0)
    return np.tensordot(g, cols, axes=(0, 0))


def ssim(
    img_a: np.ndarray,
    img_b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, averaged over channels."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    g = _gaussian_window(window, sigma)
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
