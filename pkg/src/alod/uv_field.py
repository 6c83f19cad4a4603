"""Multi-level learnable UV feature field with continuous-resolution resampling.

The field is an ordered pyramid of square feature maps. A feature map at any
resolution S between the smallest and largest level is produced by bicubically
resizing every level to S and blending the results with softmax weights that
favor the levels whose log-resolution is closest to log S. The blend is linear
in the level values, so the exact adjoint is the transposed resize weighted by
the same blend weights.

Conventions shared with the UV rasterizer: texel (i, j) of an SxS map samples
UV coordinate ((i + 0.5) / S, (j + 0.5) / S); the bicubic kernel is Catmull-Rom
(a = -0.5) with sample coordinates clamped at the borders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def resolution_for_lod(l: float, s_max: int, s_min: int) -> int:
    """Map a continuous LOD value in [0, 1] to an integer UV resolution.

    The underlying map is linear, S = s_max - l * (s_max - s_min); the result
    is rounded to the nearest integer with ties toward s_max.
    """
    if not 0.0 <= l <= 1.0:
        raise ValueError(f"lod must be in [0, 1], got {l}")
    if s_min > s_max:
        raise ValueError(f"s_min ({s_min}) must not exceed s_max ({s_max})")
    if s_min < 1:
        raise ValueError(f"s_min must be positive, got {s_min}")
    s = s_max - l * (s_max - s_min)
    return int(min(max(math.floor(s + 0.5), s_min), s_max))


def blend_weights(resolutions, target_s: int, tau: float) -> np.ndarray:
    """Softmax blend weights over levels: w_i proportional to exp(-|ln S_i - ln S| / tau).

    Strictly positive and normalized to 1, so every level keeps a gradient
    path; the level nearest in log-resolution dominates.
    """
    resolutions = np.asarray(resolutions, dtype=np.float64)
    if np.any(resolutions < 1):
        raise ValueError("all resolutions must be >= 1")
    if target_s < 1:
        raise ValueError(f"target_s must be >= 1, got {target_s}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = -np.abs(np.log(resolutions) - math.log(target_s)) / tau
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


# ---------------------------------------------------------------------------
# Bicubic (Catmull-Rom) resize as a precomputed separable weight matrix.
# ---------------------------------------------------------------------------

def _catmull_rom_row_weights(s_in: int, s_out: int) -> np.ndarray:
    """Dense (s_out, s_in) matrix of 1-D Catmull-Rom resize weights.

    Output center (j + 0.5)/s_out lands at input index u = (j + 0.5)*s_in/s_out
    - 0.5; four taps around floor(u) get the a=-0.5 cubic weights, with tap
    indices clamped to the border (weights accumulate onto the clamped texel).
    Rows sum to exactly the kernel sum, so constants are preserved, and
    s_in == s_out yields the exact identity.
    """
    mat = np.zeros((s_out, s_in), dtype=np.float64)
    for j in range(s_out):
        u = (j + 0.5) * s_in / s_out - 0.5
        base = math.floor(u)
        t = u - base
        t2 = t * t
        t3 = t2 * t
        w = (
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        )
        for tap, wt in enumerate(w):
            v = min(max(base - 1 + tap, 0), s_in - 1)
            mat[j, v] += wt
    return mat


_WEIGHT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def resize_matrix(s_in: int, s_out: int) -> np.ndarray:
    key = (s_in, s_out)
    mat = _WEIGHT_CACHE.get(key)
    if mat is None:
        mat = _catmull_rom_row_weights(s_in, s_out)
        _WEIGHT_CACHE[key] = mat
    return mat


@dataclass
class FeatureMap:
    """One square learnable feature map: (S, S, D_f) array of latent features."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"feature map must be (S, S, C), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[2] < 1:
            raise ValueError("resolution and channel count must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def bicubic_resize(fmap: FeatureMap, target_s: int) -> FeatureMap:
    """Resize a feature map to target_s x target_s (Catmull-Rom, channelwise)."""
    if target_s < 1:
        raise ValueError(f"target_s must be >= 1, got {target_s}")
    return FeatureMap(_resize_array(fmap.data, target_s))


def _resize_array(data: np.ndarray, target_s: int) -> np.ndarray:
    s_in = data.shape[0]
    if target_s == s_in:
        return data.copy()
    a = resize_matrix(s_in, target_s).astype(data.dtype)
    # rows (axis 0) then columns (axis 1); channels ride along
    out = np.tensordot(a, data, axes=(1, 0))
    out = np.tensordot(a, out, axes=(1, 1)).transpose(1, 0, 2)
    return out


def _resize_adjoint(grad: np.ndarray, s_in: int) -> np.ndarray:
    """Exact transpose of _resize_array: scatter output-texel gradients back."""
    s_out = grad.shape[0]
    if s_in == s_out:
        return grad.copy()
    a = resize_matrix(s_in, s_out).astype(grad.dtype)
    out = np.tensordot(a.T, grad, axes=(1, 0))
    out = np.tensordot(a.T, out, axes=(1, 1)).transpose(1, 0, 2)
    return out


@dataclass
class FeatureField:
    """Ordered pyramid of feature maps with strictly increasing resolutions."""

    levels: list[FeatureMap]
    tau: float = 0.35

    def __post_init__(self):
        # the degenerate single-level field (s_min == s_max) is permitted;
        # trained models always carry at least the min and max resolutions
        if len(self.levels) < 1:
            raise ValueError("field needs at least one feature map")
        res = [m.resolution for m in self.levels]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"level resolutions must strictly increase, got {res}")
        channels = {m.channels for m in self.levels}
        if len(channels) != 1:
            raise ValueError(f"levels disagree on channel count: {sorted(channels)}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def s_min(self) -> int:
        return self.levels[0].resolution

    @property
    def s_max(self) -> int:
        return self.levels[-1].resolution

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    @property
    def resolutions(self) -> list[int]:
        return [m.resolution for m in self.levels]


def init_field(resolutions, channels: int, rng: np.random.Generator,
               tau: float = 0.35, scale: float = 1e-2,
               dtype=np.float32) -> FeatureField:
    """Fresh field with i.i.d. uniform values in [-scale, scale]."""
    levels = [
        FeatureMap(rng.uniform(-scale, scale, size=(s, s, channels)).astype(dtype))
        for s in resolutions
    ]
    return FeatureField(levels, tau=tau)


def resample(field: FeatureField, l: float) -> FeatureMap:
    """Blend all levels, bicubically resized to the resolution implied by l."""
    out, _ = resample_with_cache(field, l)
    return out


def resample_with_cache(field: FeatureField, l: float):
    s = resolution_for_lod(l, field.s_max, field.s_min)
    w = blend_weights(field.resolutions, s, field.tau)
    acc = None
    for wi, level in zip(w, field.levels):
        resized = _resize_array(level.data, s)
        wi = level.data.dtype.type(wi)  # keep float32 fields in float32
        acc = wi * resized if acc is None else acc + wi * resized
    cache = _ResampleCache(target_s=s, weights=w,
                           level_resolutions=field.resolutions)
    return FeatureMap(acc), cache


@dataclass
class _ResampleCache:
    target_s: int
    weights: np.ndarray
    level_resolutions: list[int] = field(default_factory=list)


def resample_backward(field: FeatureField, l: float,
                      grad_out: np.ndarray) -> list[np.ndarray]:
    """Per-level gradients of a scalar loss through resample.

    l is an input, not a parameter, so no gradient is returned for it. Each
    level receives weight_i times the resize adjoint of grad_out.
    """
    s = resolution_for_lod(l, field.s_max, field.s_min)
    if grad_out.shape != (s, s, field.channels):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match resample output "
            f"({s}, {s}, {field.channels}) at l={l}"
        )
    w = blend_weights(field.resolutions, s, field.tau)
    return [
        grad_out.dtype.type(wi) * _resize_adjoint(grad_out, level.resolution)
        for wi, level in zip(w, field.levels)
    ]
