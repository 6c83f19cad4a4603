"""Image quality metrics: L1, PSNR, SSIM (Gaussian-windowed, valid region)."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 100.0
_MSE_FLOOR = 1e-10


def l1(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10(MSE) for unit-range images, capped at 100 dB."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _window_means(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(channel, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11,
         sigma: float = 1.5) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Standard constants K1=0.01, K2=0.03 on unit-range images; statistics are
    population moments over the window; the boundary (half a window) is
    cropped rather than padded. Channels are averaged.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window} for SSIM")
    kernel = _gaussian_kernel(window, sigma).astype(np.float64)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    scores = []
    for c in range(a.shape[2]):
        x = a[:, :, c].astype(np.float64)
        y = b[:, :, c].astype(np.float64)
        mu_x = _window_means(x, kernel)
        mu_y = _window_means(y, kernel)
        xx = _window_means(x * x, kernel) - mu_x ** 2
        yy = _window_means(y * y, kernel) - mu_y ** 2
        xy = _window_means(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
