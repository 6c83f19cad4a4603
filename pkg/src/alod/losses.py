"""Training losses: part-masked Huber RGB term plus attribute regularizers.

Total objective:

  L = L_rgb + lambda_lpips * L_perceptual + lambda_mu * L_mu
      + lambda_s * (1 - 0.5 * lod) * L_s

  L_rgb = Huber(I, I_hat) + lambda_parts * Huber(I * B, I_hat * B)

L_mu and L_s are the mean L2 norms of the position offsets and the scales.
The scale regularizer is weighted down at low detail (lod -> 1 halves it)
because sparse Gaussians must stay larger to cover the surface. The
perceptual term is a pluggable hook (callable returning value and image
gradient); it defaults to off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splat import AttributeGrads, GaussianSet
from .geometry import UVPositionMap


@dataclass
class LossWeights:
    lambda_parts: float = 20.0
    lambda_lpips: float = 0.05
    lambda_mu: float = 0.001
    lambda_s: float = 0.5
    huber_delta: float = 0.1

    def __post_init__(self):
        for name in ("lambda_parts", "lambda_lpips", "lambda_mu", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


def huber(a: np.ndarray, b: np.ndarray, delta: float) -> float:
    """Mean elementwise Huber penalty between two equal-shape images."""
    val, _ = huber_with_grad(a, b, delta)
    return val


def huber_with_grad(a: np.ndarray, b: np.ndarray, delta: float):
    """Huber value and its gradient with respect to b."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    e = b - a
    abs_e = np.abs(e)
    quad = abs_e <= delta
    vals = np.where(quad, 0.5 * e * e, delta * (abs_e - 0.5 * delta))
    n = e.size
    grad = np.where(quad, e, delta * np.sign(e)) / n
    return float(vals.sum() / n), grad


def rgb_loss(image: np.ndarray, rendered: np.ndarray, part_mask: np.ndarray,
             weights: LossWeights) -> float:
    total, _, _, _ = rgb_loss_with_grad(image, rendered, part_mask, weights)
    return total


def rgb_loss_with_grad(image: np.ndarray, rendered: np.ndarray,
                       part_mask: np.ndarray, weights: LossWeights):
    """Full-image Huber plus the part-weighted Huber on masked images."""
    if image.shape != rendered.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {rendered.shape}")
    if part_mask.shape != image.shape[:2]:
        raise ValueError("part mask must match the image spatially")
    full, g_full = huber_with_grad(image, rendered, weights.huber_delta)
    m = part_mask[:, :, None].astype(image.dtype)
    parts, g_parts = huber_with_grad(image * m, rendered * m, weights.huber_delta)
    total = full + weights.lambda_parts * parts
    grad = g_full + weights.lambda_parts * g_parts * m
    return total, full, parts, grad


@dataclass
class LossBreakdown:
    total: float
    rgb: float
    rgb_full: float
    rgb_parts: float
    mu: float
    s: float
    lpips: float


def _mean_norm_with_grad(x: np.ndarray, coeff: float):
    """coeff * mean_i ||x_i||_2 and its gradient; zero rows get zero gradient."""
    if len(x) == 0:
        return 0.0, np.zeros_like(x)
    norms = np.linalg.norm(x, axis=1)
    value = coeff * float(norms.mean())
    safe = np.maximum(norms, 1e-12)[:, None]
    grad = coeff * x / (safe * len(x))
    grad[norms < 1e-12] = 0.0
    return value, grad


def total_loss(image: np.ndarray, rendered: np.ndarray, part_mask: np.ndarray,
               gauss: GaussianSet, pmap: UVPositionMap, lod: float,
               weights: LossWeights, perceptual_hook=None):
    """Scalar loss plus the gradient feed for the backward pass.

    Returns (LossBreakdown, grad_image, AttributeGrads) where the attribute
    grads carry only the regularizer terms (mu offsets, scales).
    """
    rgb_total, rgb_full, rgb_parts, grad_image = rgb_loss_with_grad(
        image, rendered, part_mask, weights)

    delta_mu = gauss.mu - pmap.positions[pmap.mask].astype(gauss.mu.dtype)
    l_mu, d_mu = _mean_norm_with_grad(delta_mu, weights.lambda_mu)
    s_coeff = weights.lambda_s * (1.0 - 0.5 * lod)
    l_s, d_s = _mean_norm_with_grad(gauss.scale, s_coeff)

    l_lpips = 0.0
    if perceptual_hook is not None and weights.lambda_lpips > 0:
        l_lpips, g_lpips = perceptual_hook(image, rendered)
        grad_image = grad_image + weights.lambda_lpips * g_lpips

    total = rgb_total + weights.lambda_lpips * l_lpips + l_mu + l_s
    breakdown = LossBreakdown(total=float(total), rgb=rgb_total,
                              rgb_full=rgb_full, rgb_parts=rgb_parts,
                              mu=l_mu, s=l_s, lpips=float(l_lpips))
    attr = AttributeGrads(mu=d_mu, scale=d_s,
                          quat=np.zeros_like(gauss.quat),
                          alpha=np.zeros_like(gauss.alpha),
                          sh=np.zeros_like(gauss.sh))
    return breakdown, grad_image, attr
