"""Differentiable 3D Gaussian splatting on the CPU.

Two renderers share one compositing semantics:

  * ``render``            tiled fast path (16x16 px tiles, per-Gaussian
                          footprint bounds derived from the alpha cutoff)
  * ``render_reference``  brute force, every Gaussian against every pixel

For each pixel, contributions are a_i = min(alpha_i * G_i, alpha_clip) over
depth-sorted primitives; a contribution is included iff a_i > alpha_cutoff and
the transmittance accumulated over included closer primitives is still above
transmittance_min. The footprint radius is sized so any pixel outside it is
provably below the alpha cutoff, which makes the two renderers agree to float
rounding rather than "approximately".

``render_backward`` provides exact reverse-mode gradients for all five
Gaussian attributes through compositing, the 2D Gaussian, the EWA-style
projection, covariance construction, and spherical-harmonics color. The depth
sort and the inclusion masks are treated as constants.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera

# ---------------------------------------------------------------------------
# Gaussian container
# ---------------------------------------------------------------------------

@dataclass
class GaussianSet:
    """Flat per-Gaussian attribute arrays ready for rasterization."""

    mu: np.ndarray     # (N, 3) positions
    scale: np.ndarray  # (N, 3) positive scales
    quat: np.ndarray   # (N, 4) unit quaternions (w, x, y, z)
    alpha: np.ndarray  # (N,) opacities in (0, 1)
    sh: np.ndarray     # (N, 3 * n_basis) SH coefficients, basis-major

    def __post_init__(self):
        n = len(self.mu)
        shapes = (self.mu.shape, self.scale.shape, self.quat.shape,
                  self.alpha.shape, self.sh.shape)
        expect = ((n, 3), (n, 3), (n, 4), (n,), (n, self.sh.shape[1] if self.sh.ndim == 2 else -1))
        if shapes != expect or self.sh.shape[1] % 3 != 0:
            raise ValueError(f"inconsistent attribute shapes: {shapes}")
        if n == 0:
            return
        for arr in (self.mu, self.scale, self.quat, self.alpha, self.sh):
            if not np.all(np.isfinite(arr)):
                raise ValueError("Gaussian attributes must be finite")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if np.any(self.alpha <= 0) or np.any(self.alpha >= 1):
            raise ValueError("opacities must lie strictly in (0, 1)")
        norms = np.linalg.norm(self.quat, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("quaternions must be unit length within 1e-6")

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def n_basis(self) -> int:
        return self.sh.shape[1] // 3


@dataclass
class AttributeGrads:
    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    alpha: np.ndarray
    sh: np.ndarray


@dataclass
class RenderSettings:
    background: tuple = (1.0, 1.0, 1.0)
    alpha_clip: float = 0.999
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    dilation: float = 0.3
    tile_size: int = 16
    radius_pad: float = 0.01
    exact_coverage: bool = False  # force full-image footprints (gradient checks)


# ---------------------------------------------------------------------------
# Quaternions and covariance construction
# ---------------------------------------------------------------------------

def normalize_quaternions(q: np.ndarray):
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norms, norms


def normalize_backward(q_unit: np.ndarray, norms: np.ndarray,
                       grad: np.ndarray) -> np.ndarray:
    """Adjoint of row normalization: project out the radial component."""
    radial = np.sum(q_unit * grad, axis=-1, keepdims=True)
    return (grad - q_unit * radial) / norms


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotation_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Chain an (N, 3, 3) adjoint on the rotation back to the quaternion."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_r
    dw = 2 * (-g[..., 0, 1] * z + g[..., 0, 2] * y + g[..., 1, 0] * z
              - g[..., 1, 2] * x - g[..., 2, 0] * y + g[..., 2, 1] * x)
    dx = 2 * (g[..., 0, 1] * y + g[..., 0, 2] * z + g[..., 1, 0] * y
              - 2 * g[..., 1, 1] * x - g[..., 1, 2] * w + g[..., 2, 0] * z
              + g[..., 2, 1] * w - 2 * g[..., 2, 2] * x)
    dy = 2 * (-2 * g[..., 0, 0] * y + g[..., 0, 1] * x + g[..., 0, 2] * w
              + g[..., 1, 0] * x + g[..., 1, 2] * z - g[..., 2, 0] * w
              + g[..., 2, 1] * z - 2 * g[..., 2, 2] * y)
    dz = 2 * (-2 * g[..., 0, 0] * z - g[..., 0, 1] * w + g[..., 0, 2] * x
              + g[..., 1, 0] * w - 2 * g[..., 1, 1] * z + g[..., 1, 2] * y
              + g[..., 2, 0] * x + g[..., 2, 1] * y)
    return np.stack([dw, dx, dy, dz], axis=-1)


def covariance_from_sq(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T for scales s and unit quaternions q; batched.

    Guaranteed symmetric positive semi-definite with eigenvalues s^2.
    """
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    q2 = np.atleast_2d(q)
    if np.any(s2 <= 0):
        raise ValueError("scales must be positive")
    norms = np.linalg.norm(q2, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("quaternion norm deviates from 1 by more than 1e-6")
    qn = q2 / norms[..., None]
    r = quat_to_rotation(qn)
    m = r * s2[:, None, :]
    sigma = m @ np.swapaxes(m, -1, -2)
    return sigma[0] if single else sigma


def _covariance_batch(s: np.ndarray, q: np.ndarray):
    """Internal covariance with cached factors for the backward pass."""
    qn, norms = normalize_quaternions(q)
    r = quat_to_rotation(qn)
    m = r * s[:, None, :]
    sigma = m @ np.swapaxes(m, -1, -2)
    return sigma, (s, q, qn, norms, r, m)


def _covariance_backward(cache, grad_sigma: np.ndarray):
    s, q, qn, norms, r, m = cache
    gm = (grad_sigma + np.swapaxes(grad_sigma, -1, -2)) @ m
    ds = np.einsum("nik,nik->nk", gm, r)
    gr = gm * s[:, None, :]
    gq_unit = quat_to_rotation_backward(qn, gr)
    dq = normalize_backward(qn, norms, gq_unit)
    return ds, dq


def evaluate_gaussian(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian influence exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.linalg.cond(sigma) > 1e12:
        raise ValueError("covariance is singular or near-singular")
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    sol = np.linalg.solve(sigma, d[..., None])[..., 0]
    maha = np.sum(d * sol, axis=-1)
    return np.exp(-0.5 * maha)


# ---------------------------------------------------------------------------
# Spherical harmonics (real basis, degree <= 3, 3DGS constants and signs)
# ---------------------------------------------------------------------------

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_basis(dirs: np.ndarray, n_basis: int) -> np.ndarray:
    """Evaluate the first n_basis real SH functions at unit directions (N, 3)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, n_basis), dtype=dirs.dtype)
    out[:, 0] = SH_C0
    if n_basis == 1:
        return out
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if n_basis == 4:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = SH_C2[0] * xy
    out[:, 5] = SH_C2[1] * yz
    out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * xz
    out[:, 8] = SH_C2[4] * (xx - yy)
    if n_basis == 9:
        return out
    out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    out[:, 10] = SH_C3[1] * xy * z
    out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, n_basis: int) -> np.ndarray:
    """d basis / d direction as an (N, n_basis, 3) array."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n, dtype=dirs.dtype)
    g = np.zeros((n, n_basis, 3), dtype=dirs.dtype)
    if n_basis == 1:
        return g
    g[:, 1, 1] = -SH_C1
    g[:, 2, 2] = SH_C1
    g[:, 3, 0] = -SH_C1
    if n_basis == 4:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=1)
    g[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=1)
    g[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
    g[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=1)
    g[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=1)
    if n_basis == 9:
        return g
    g[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=1)
    g[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
    g[:, 11] = SH_C3[2] * np.stack(
        [-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=1)
    g[:, 12] = SH_C3[3] * np.stack(
        [-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=1)
    g[:, 13] = SH_C3[4] * np.stack(
        [4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=1)
    g[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=1)
    g[:, 15] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=1)
    return g


def evaluate_sh(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """SH color: basis dot coefficients per channel, plus 0.5, clamped at 0.

    coeffs is (N, 3 * n_basis) with basis-major layout (coeff of basis k for
    channel c at column 3 * k + c).
    """
    coeffs = np.atleast_2d(coeffs)
    dirs = np.atleast_2d(dirs)
    if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-6):
        raise ValueError("directions must be unit length within 1e-6")
    n_basis = coeffs.shape[1] // 3
    basis = sh_basis(dirs, n_basis)
    raw = np.einsum("nk,nkc->nc", basis, coeffs.reshape(-1, n_basis, 3)) + 0.5
    return np.maximum(raw, 0.0)


def _evaluate_sh_cached(coeffs: np.ndarray, dirs: np.ndarray):
    n_basis = coeffs.shape[1] // 3
    basis = sh_basis(dirs, n_basis)
    raw = np.einsum("nk,nkc->nc", basis, coeffs.reshape(-1, n_basis, 3)) + 0.5
    return np.maximum(raw, 0.0), (basis, raw > 0)


def _evaluate_sh_backward(coeffs, dirs, cache, grad_color):
    basis, open_mask = cache
    n_basis = coeffs.shape[1] // 3
    g = grad_color * open_mask  # clamp at zero blocks the gradient
    dcoeff = np.einsum("nk,nc->nkc", basis, g).reshape(len(coeffs), -1)
    bg = sh_basis_grad(dirs, n_basis)
    # d color_c / d dir = sum_k coeff[k, c] * dbasis_k / ddir
    ddir = np.einsum("nkc,nc,nkd->nd", coeffs.reshape(-1, n_basis, 3), g, bg)
    return dcoeff, ddir


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class SplatPrimitives:
    """Screen-space Gaussians after projection and culling (struct of arrays)."""

    mean2d: np.ndarray    # (M, 2) pixels
    cov2d: np.ndarray     # (M, 2, 2) pixels^2, dilated
    inv_cov: np.ndarray   # (M, 2, 2)
    depth: np.ndarray     # (M,) camera-space z
    alpha: np.ndarray     # (M,)
    color: np.ndarray     # (M, 3)
    radius: np.ndarray    # (M,) footprint radius in pixels
    index: np.ndarray     # (M,) indices into the source GaussianSet
    cache: object = field(default=None, repr=False)


def _footprint_radius(cov2d, alpha, settings: RenderSettings, width, height):
    a = cov2d[:, 0, 0]
    c = cov2d[:, 1, 1]
    b = cov2d[:, 0, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    if settings.exact_coverage or settings.alpha_cutoff <= 0:
        return np.full(len(a), float(max(width, height) * 2.0))
    ratio = np.maximum(alpha, 1e-30) / settings.alpha_cutoff
    r2 = 2.0 * np.log(np.maximum(ratio, 1.0)) * lam_max
    return np.sqrt(r2) + settings.radius_pad


def project(gset: GaussianSet, camera: Camera,
            settings: RenderSettings | None = None,
            want_cache: bool = False) -> SplatPrimitives:
    """Project Gaussians to screen space; Gaussians behind the near plane drop out.

    The 2D covariance uses the first-order (EWA-style) perspective Jacobian
    plus an isotropic screen-space dilation.
    """
    settings = settings or RenderSettings()
    dtype = gset.mu.dtype
    rot = camera.rotation.astype(dtype)
    trans = camera.translation.astype(dtype)
    t_cam = gset.mu @ rot.T + trans
    visible = t_cam[:, 2] > camera.near
    idx = np.nonzero(visible)[0]

    t = t_cam[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    inv_z = 1.0 / z
    mean2d = np.stack([camera.fx * x * inv_z + camera.cx,
                       camera.fy * y * inv_z + camera.cy], axis=1)

    sigma, cov_cache = _covariance_batch(gset.scale[idx], gset.quat[idx])

    # V = J @ R rowwise; J is the 2x3 perspective Jacobian at t
    jr0 = camera.fx * inv_z
    jr1 = camera.fy * inv_z
    j02 = -camera.fx * x * inv_z ** 2
    j12 = -camera.fy * y * inv_z ** 2
    v = np.empty((len(idx), 2, 3), dtype=dtype)
    v[:, 0] = jr0[:, None] * rot[0] + j02[:, None] * rot[2]
    v[:, 1] = jr1[:, None] * rot[1] + j12[:, None] * rot[2]
    cov2d = v @ sigma @ np.swapaxes(v, -1, -2)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    inv_cov = np.empty_like(cov2d)
    inv_cov[:, 0, 0] = cov2d[:, 1, 1] / det
    inv_cov[:, 1, 1] = cov2d[:, 0, 0] / det
    inv_cov[:, 0, 1] = -cov2d[:, 0, 1] / det
    inv_cov[:, 1, 0] = -cov2d[:, 1, 0] / det

    u = gset.mu[idx] - camera.position.astype(dtype)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    dirs = u / norms
    color, sh_cache = _evaluate_sh_cached(gset.sh[idx], dirs)

    radius = _footprint_radius(cov2d, gset.alpha[idx], settings,
                               camera.width, camera.height)
    cache = None
    if want_cache:
        cache = dict(t=t, v=v, sigma=sigma, cov_cache=cov_cache, dirs=dirs,
                     norms=norms, sh_cache=sh_cache, rot=rot)
    return SplatPrimitives(mean2d=mean2d, cov2d=cov2d, inv_cov=inv_cov,
                           depth=z.copy(), alpha=gset.alpha[idx].copy(),
                           color=color, radius=radius, index=idx, cache=cache)


def _project_backward(gset, camera, prim, dmean2d, dcov2d, dalpha_p, dcolor):
    """Map screen-space adjoints back to Gaussian attributes."""
    cache = prim.cache
    t, v, sigma = cache["t"], cache["v"], cache["sigma"]
    rot = cache["rot"]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    inv_z = 1.0 / z

    n = len(gset)
    grads = AttributeGrads(
        mu=np.zeros_like(gset.mu), scale=np.zeros_like(gset.scale),
        quat=np.zeros_like(gset.quat), alpha=np.zeros_like(gset.alpha),
        sh=np.zeros_like(gset.sh),
    )
    idx = prim.index
    if n == 0 or len(idx) == 0:
        return grads

    # color -> sh coefficients and view direction -> mu
    dcoeff, ddir = _evaluate_sh_backward(gset.sh[idx], cache["dirs"],
                                         cache["sh_cache"], dcolor)
    dirs, norms = cache["dirs"], cache["norms"]
    radial = np.sum(dirs * ddir, axis=1, keepdims=True)
    dmu = (ddir - dirs * radial) / norms

    # cov2d = V Sigma V^T + dilation I
    sym = dcov2d + np.swapaxes(dcov2d, -1, -2)
    dv = sym @ v @ sigma
    dsigma = np.swapaxes(v, -1, -2) @ dcov2d @ v
    ds, dq = _covariance_backward(cache["cov_cache"], dsigma)

    # V rows are jr * rot_row + j_2 * rot[2]; collect dt from dV and dmean2d
    djr0 = np.einsum("nd,d->n", dv[:, 0], rot[0])
    djr1 = np.einsum("nd,d->n", dv[:, 1], rot[1])
    dj02 = np.einsum("nd,d->n", dv[:, 0], rot[2])
    dj12 = np.einsum("nd,d->n", dv[:, 1], rot[2])
    fx, fy = camera.fx, camera.fy
    dt = np.zeros_like(t)
    dt[:, 0] = -fx * inv_z ** 2 * dj02
    dt[:, 1] = -fy * inv_z ** 2 * dj12
    dt[:, 2] = (-fx * inv_z ** 2 * djr0 - fy * inv_z ** 2 * djr1
                + 2 * fx * x * inv_z ** 3 * dj02
                + 2 * fy * y * inv_z ** 3 * dj12)
    # mean2d = (fx x / z + cx, fy y / z + cy)
    dt[:, 0] += fx * inv_z * dmean2d[:, 0]
    dt[:, 1] += fy * inv_z * dmean2d[:, 1]
    dt[:, 2] += (-fx * x * inv_z ** 2 * dmean2d[:, 0]
                 - fy * y * inv_z ** 2 * dmean2d[:, 1])
    dmu += dt @ rot

    grads.mu[idx] = dmu
    grads.scale[idx] = ds
    grads.quat[idx] = dq
    grads.alpha[idx] = dalpha_p
    grads.sh[idx] = dcoeff
    return grads


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _pixel_grid(width, height, dtype):
    px = np.arange(width, dtype=dtype) + 0.5
    py = np.arange(height, dtype=dtype) + 0.5
    return px, py


def _tile_ranges(prim: SplatPrimitives, width, height, tile):
    """Per-primitive inclusive tile index ranges overlapped by the footprint."""
    x0 = prim.mean2d[:, 0] - prim.radius
    x1 = prim.mean2d[:, 0] + prim.radius
    y0 = prim.mean2d[:, 1] - prim.radius
    y1 = prim.mean2d[:, 1] + prim.radius
    tx0 = np.clip(np.floor(x0 / tile), 0, (width - 1) // tile).astype(np.int64)
    tx1 = np.clip(np.floor(x1 / tile), 0, (width - 1) // tile).astype(np.int64)
    ty0 = np.clip(np.floor(y0 / tile), 0, (height - 1) // tile).astype(np.int64)
    ty1 = np.clip(np.floor(y1 / tile), 0, (height - 1) // tile).astype(np.int64)
    outside = (x1 < 0) | (x0 > width) | (y1 < 0) | (y0 > height)
    return tx0, tx1, ty0, ty1, outside


def _composite_arrays(a, colors, bg, tmin):
    """Shared masked front-to-back blend over (K, P) contribution array a."""
    one_minus = 1.0 - a
    t_incl = np.cumprod(one_minus, axis=0)
    t_excl = np.empty_like(t_incl)
    t_excl[0] = 1.0
    t_excl[1:] = t_incl[:-1]
    live = t_excl > tmin
    w = a * t_excl * live
    out = w.T @ colors
    t_end = t_incl[-1]
    out += t_end[:, None] * bg
    return out, t_end, t_excl, w, live


def render(gset: GaussianSet, camera: Camera,
           settings: RenderSettings | None = None,
           want_alpha: bool = False, want_cache: bool = False):
    """Tiled differentiable rasterization; returns the raw (H, W, 3) image.

    Values are not clamped here so losses can consume the unclamped signal;
    clamp when writing display output. Deterministic: depth sort is stable
    with ties broken by Gaussian index.
    """
    settings = settings or RenderSettings()
    h, w = camera.height, camera.width
    dtype = gset.mu.dtype if len(gset) else np.float64
    bg = np.asarray(settings.background, dtype=dtype)
    image = np.empty((h, w, 3), dtype=dtype)
    image[:] = bg
    alpha_map = np.zeros((h, w), dtype=dtype)
    if len(gset) == 0:
        results = [image]
        if want_alpha:
            results.append(alpha_map)
        if want_cache:
            results.append(None)
        return results[0] if len(results) == 1 else tuple(results)

    prim = project(gset, camera, settings, want_cache=want_cache)
    order = np.argsort(prim.depth, kind="stable")
    tile = settings.tile_size
    tx0, tx1, ty0, ty1, outside = _tile_ranges(prim, w, h, tile)
    # reorder once so every per-tile candidate list is already depth sorted
    s_mean = prim.mean2d[order]
    s_inv = prim.inv_cov[order]
    s_alpha = prim.alpha[order]
    s_color = prim.color[order]
    s_tx0, s_tx1 = tx0[order], tx1[order]
    s_ty0, s_ty1 = ty0[order], ty1[order]
    s_out = outside[order]

    px, py = _pixel_grid(w, h, dtype)
    n_tx = (w + tile - 1) // tile
    n_ty = (h + tile - 1) // tile
    tiles = []
    for tj in range(n_ty):
        for ti in range(n_tx):
            cand = np.nonzero((s_tx0 <= ti) & (ti <= s_tx1)
                              & (s_ty0 <= tj) & (tj <= s_ty1) & ~s_out)[0]
            if len(cand) == 0:
                tiles.append(None)
                continue
            xs = px[ti * tile:min((ti + 1) * tile, w)]
            ys = py[tj * tile:min((tj + 1) * tile, h)]
            dx, dy, g, a = _tile_quantities(
                s_mean[cand], s_inv[cand], s_alpha[cand], xs, ys, settings)
            out, t_end, t_excl, _, _ = _composite_arrays(
                a, s_color[cand], bg, settings.transmittance_min)
            block = out.reshape(len(ys), len(xs), 3)
            image[tj * tile:tj * tile + len(ys), ti * tile:ti * tile + len(xs)] = block
            alpha_map[tj * tile:tj * tile + len(ys),
                      ti * tile:ti * tile + len(xs)] = (1.0 - t_end).reshape(len(ys), len(xs))
            tiles.append(_TileData(cand=cand, dx=dx, dy=dy, g=g, a=a,
                                   t_excl=t_excl, t_end=t_end)
                         if want_cache else True)

    results = [image]
    if want_alpha:
        results.append(alpha_map)
    if want_cache:
        results.append(_RenderCache(prim=prim, order=order, tiles=tiles))
    return results[0] if len(results) == 1 else tuple(results)


@dataclass
class _TileData:
    cand: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    g: np.ndarray
    a: np.ndarray
    t_excl: np.ndarray
    t_end: np.ndarray


@dataclass
class _RenderCache:
    prim: SplatPrimitives
    order: np.ndarray
    tiles: list


def _tile_quantities(mean2d, inv_cov, alpha, xs, ys, settings):
    """Per-tile (K, P) distances, Gaussian values and masked contributions.

    Pixels are visited row-major within the tile (P = len(ys) * len(xs)).
    """
    # dx[k, p] = px_x[p] - mean_x[k]; row-major pixel order matches image blocks
    px_flat = np.broadcast_to(xs[None, :], (len(ys), len(xs))).ravel()
    py_flat = np.broadcast_to(ys[:, None], (len(ys), len(xs))).ravel()
    dx = px_flat[None, :] - mean2d[:, 0, None]
    dy = py_flat[None, :] - mean2d[:, 1, None]
    q = inv_cov[:, 0, 0, None] * (dx * dx)
    q += (2.0 * inv_cov[:, 0, 1, None]) * (dx * dy)
    q += inv_cov[:, 1, 1, None] * (dy * dy)
    g = np.exp(-0.5 * q)
    a = np.minimum(alpha[:, None] * g, settings.alpha_clip)
    a *= a > settings.alpha_cutoff
    return dx, dy, g, a


def render_reference(gset: GaussianSet, camera: Camera,
                     settings: RenderSettings | None = None) -> np.ndarray:
    """Correctness oracle: sequential compositing of every Gaussian at every pixel."""
    settings = settings or RenderSettings()
    h, w = camera.height, camera.width
    dtype = gset.mu.dtype if len(gset) else np.float64
    bg = np.asarray(settings.background, dtype=dtype)
    if len(gset) == 0:
        image = np.empty((h, w, 3), dtype=dtype)
        image[:] = bg
        return image
    prim = project(gset, camera, settings)
    order = np.argsort(prim.depth, kind="stable")

    px, py = _pixel_grid(w, h, dtype)
    gx, gy = np.meshgrid(px, py, indexing="xy")
    dxs, dys = gx.ravel(), gy.ravel()
    trans = np.ones(h * w, dtype=dtype)
    out = np.zeros((h * w, 3), dtype=dtype)
    for k in order:
        dx = dxs - prim.mean2d[k, 0]
        dy = dys - prim.mean2d[k, 1]
        q = (prim.inv_cov[k, 0, 0] * dx * dx
             + 2.0 * prim.inv_cov[k, 0, 1] * dx * dy
             + prim.inv_cov[k, 1, 1] * dy * dy)
        a = np.minimum(prim.alpha[k] * np.exp(-0.5 * q), settings.alpha_clip)
        included = a > settings.alpha_cutoff
        a = a * included
        live = trans > settings.transmittance_min
        out += (a * trans * live)[:, None] * prim.color[k]
        trans = trans * (1.0 - a)
    out += trans[:, None] * bg
    return out.reshape(h, w, 3)


def render_backward(gset: GaussianSet, camera: Camera, grad_image: np.ndarray,
                    settings: RenderSettings | None = None,
                    cache: _RenderCache | None = None) -> AttributeGrads:
    """Exact gradients of sum(grad_image * render(...)) w.r.t. all attributes."""
    settings = settings or RenderSettings()
    h, w = camera.height, camera.width
    if grad_image.shape != (h, w, 3):
        raise ValueError(
            f"grad_image shape {grad_image.shape} does not match ({h}, {w}, 3)")
    if len(gset) == 0:
        return AttributeGrads(mu=np.zeros_like(gset.mu), scale=np.zeros_like(gset.scale),
                              quat=np.zeros_like(gset.quat), alpha=np.zeros_like(gset.alpha),
                              sh=np.zeros_like(gset.sh))
    if cache is None or any(t is True for t in cache.tiles):
        _, cache = render(gset, camera, settings, want_cache=True)
    prim, order, tiles = cache.prim, cache.order, cache.tiles

    dtype = gset.mu.dtype
    bg = np.asarray(settings.background, dtype=dtype)
    m = len(prim.index)
    dmean = np.zeros((m, 2), dtype=dtype)
    dcov = np.zeros((m, 2, 2), dtype=dtype)
    dalpha = np.zeros(m, dtype=dtype)
    dcolor = np.zeros((m, 3), dtype=dtype)

    s_inv = prim.inv_cov[order]
    s_alpha = prim.alpha[order]
    s_color = prim.color[order]
    tile = settings.tile_size
    n_tx = (w + tile - 1) // tile
    n_ty = (h + tile - 1) // tile

    t_idx = 0
    for tj in range(n_ty):
        for ti in range(n_tx):
            td = tiles[t_idx]
            t_idx += 1
            if td is None:
                continue
            ny = min((tj + 1) * tile, h) - tj * tile
            nx = min((ti + 1) * tile, w) - ti * tile
            gbar = grad_image[tj * tile:tj * tile + ny,
                              ti * tile:ti * tile + nx].reshape(-1, 3)

            cand = td.cand
            inv_c = s_inv[cand]
            alpha_c, color_c = s_alpha[cand], s_color[cand]
            dx, dy, g, a = td.dx, td.dy, td.g, td.a
            t_excl, t_end = td.t_excl, td.t_end
            live = t_excl > settings.transmittance_min
            wgt = a * t_excl * live
            clipped = alpha_c[:, None] * g >= settings.alpha_clip

            cg = color_c @ gbar.T                      # (K, P) color dot adjoint
            dcolor_local = wgt @ gbar                  # (K, 3)
            # d a_i: own contribution plus the transmittance of everything deeper
            u_arr = wgt * cg
            suffix = np.flip(np.cumsum(np.flip(u_arr, 0), axis=0), 0) - u_arr
            bgdot = gbar @ bg                          # (P,)
            da = (live * t_excl * cg
                  - (suffix + t_end[None, :] * bgdot[None, :])
                  / np.maximum(1.0 - a, 1e-12))
            da *= a > 0    # masks are constants; excluded terms get no gradient
            da *= ~clipped
            dg_local = da * alpha_c[:, None]
            dalpha_local = np.einsum("kp,kp->k", da, g)
            dqm = dg_local * (-0.5) * g
            mdx = inv_c[:, 0, 0, None] * dx + inv_c[:, 0, 1, None] * dy
            mdy = inv_c[:, 0, 1, None] * dx + inv_c[:, 1, 1, None] * dy
            dmean_local = np.stack([
                -2.0 * np.einsum("kp,kp->k", dqm, mdx),
                -2.0 * np.einsum("kp,kp->k", dqm, mdy)], axis=1)
            dminv = np.empty((len(cand), 2, 2), dtype=dtype)
            qx = dqm * dx
            dminv[:, 0, 0] = np.einsum("kp,kp->k", qx, dx)
            dminv[:, 0, 1] = np.einsum("kp,kp->k", qx, dy)
            dminv[:, 1, 0] = dminv[:, 0, 1]
            dminv[:, 1, 1] = np.einsum("kp,kp->k", dqm * dy, dy)
            dcov_local = -inv_c @ dminv @ inv_c

            sel = order[cand]  # unique within a tile, so fancy += accumulates safely
            dmean[sel] += dmean_local
            dcov[sel] += dcov_local
            dalpha[sel] += dalpha_local
            dcolor[sel] += dcolor_local

    if prim.cache is None:
        prim = project(gset, camera, settings, want_cache=True)
    return _project_backward(gset, camera, prim, dmean, dcov, dalpha, dcolor)


# ---------------------------------------------------------------------------
# Point-cloud export
# ---------------------------------------------------------------------------

def export_gaussians_ply(gset: GaussianSet, path: str | Path):
    """Binary little-endian PLY with stable per-Gaussian float32 properties.

    Property order: x y z, scale_0..2, rot_0..3 (w x y z), opacity,
    sh_0..sh_{3*n_basis-1} (basis-major: coefficient of basis k, channel c at
    index 3k + c).
    """
    path = Path(path)
    n = len(gset)
    n_sh = gset.sh.shape[1]
    props = (["x", "y", "z"]
             + [f"scale_{i}" for i in range(3)]
             + [f"rot_{i}" for i in range(4)]
             + ["opacity"]
             + [f"sh_{i}" for i in range(n_sh)])
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    data = np.concatenate([
        gset.mu, gset.scale, gset.quat, gset.alpha[:, None], gset.sh,
    ], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())
