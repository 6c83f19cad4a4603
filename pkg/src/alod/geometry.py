"""Deformable UV-mapped mesh, UV-space rasterization, positional encoding, cameras.

The mesh is the geometric anchor of the avatar: every covered texel of its UV
layout becomes one Gaussian, with the texel's interpolated 3D surface point as
the initial Gaussian position. Texel (i, j) of an SxS map samples UV
((i + 0.5) / S, (j + 0.5) / S), matching the feature-field convention so
position maps and feature maps align per texel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid or inconsistent on-disk data (meshes, datasets, sidecars)."""


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray      # (V, 3) float64, rest pose
    faces: np.ndarray         # (F, 3) int32 vertex indices
    uvs: np.ndarray           # (V, 2) float64 in [0, 1]^2
    blendshapes: np.ndarray   # (B, V, 3) per-vertex offsets
    _raster_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        v = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise DataError("face index out of range")
        if self.uvs.shape != (v, 2):
            raise DataError(f"expected per-vertex UVs of shape ({v}, 2)")
        if self.uvs.size and (self.uvs.min() < -1e-12 or self.uvs.max() > 1 + 1e-12):
            raise DataError("UV coordinates must lie in [0, 1]")
        if self.blendshapes.ndim != 3 or self.blendshapes.shape[1:] != (v, 3):
            raise DataError("blendshapes must have shape (B, V, 3)")
        self._validate_uv_triangles()

    def _validate_uv_triangles(self):
        if not len(self.faces):
            return
        tri = self.uvs[self.faces]  # (F, 3, 2)
        e0 = tri[:, 1] - tri[:, 0]
        e1 = tri[:, 2] - tri[:, 0]
        area = 0.5 * np.abs(e0[:, 0] * e1[:, 1] - e0[:, 1] * e1[:, 0])
        if np.any(area <= 1e-12):
            bad = int(np.argmin(area))
            raise DataError(f"degenerate UV triangle at face {bad} (area {area[bad]:.3e})")
        self._check_uv_overlap()

    def _check_uv_overlap(self, s: int = 128):
        # Overlapping charts double-claim texel centers; adjacent triangles
        # sharing an edge do not (interior test is strict).
        claims = np.zeros((s, s), dtype=np.int32)
        for f in range(len(self.faces)):
            ii, jj, lam = _texels_in_triangle(self.uvs[self.faces[f]], s, strict=True)
            np.add.at(claims, (ii, jj), 1)
        if np.any(claims > 1):
            raise DataError("UV triangles overlap (texel claimed by multiple charts)")

    @property
    def blendshape_count(self) -> int:
        return self.blendshapes.shape[0]

    def bounding_sphere(self):
        """Rest-pose bounding sphere (center, radius) used to normalize coordinates."""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        center = 0.5 * (lo + hi)
        radius = float(np.linalg.norm(self.vertices - center, axis=1).max())
        return center, max(radius, 1e-12)

    def raster_binding(self, s: int):
        """Texel-to-surface binding at resolution s: (mask, face_idx, bary), cached.

        Coverage depends only on the UV layout, so the binding (and therefore
        the mask) is identical for every expression.
        """
        cached = self._raster_cache.get(s)
        if cached is None:
            cached = _build_binding(self, s)
            self._raster_cache[s] = cached
        return cached


def _texels_in_triangle(tri_uv: np.ndarray, s: int, strict: bool = False):
    """Texel indices covered by one UV triangle plus barycentric coordinates."""
    eps = 1e-12
    lo = tri_uv.min(axis=0)
    hi = tri_uv.max(axis=0)
    i0 = max(int(math.ceil(lo[0] * s - 0.5)), 0)
    i1 = min(int(math.floor(hi[0] * s - 0.5)), s - 1)
    j0 = max(int(math.ceil(lo[1] * s - 0.5)), 0)
    j1 = min(int(math.floor(hi[1] * s - 0.5)), s - 1)
    if i1 < i0 or j1 < j0:
        empty_i = np.empty(0, dtype=np.int64)
        return empty_i, empty_i.copy(), np.empty((0, 3))
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    pu = (ii + 0.5) / s - tri_uv[0, 0]
    pv = (jj + 0.5) / s - tri_uv[0, 1]
    e0 = tri_uv[1] - tri_uv[0]
    e1 = tri_uv[2] - tri_uv[0]
    denom = e0[0] * e1[1] - e0[1] * e1[0]
    l1 = (pu * e1[1] - pv * e1[0]) / denom
    l2 = (e0[0] * pv - e0[1] * pu) / denom
    l0 = 1.0 - l1 - l2
    if strict:
        inside = (l0 > eps) & (l1 > eps) & (l2 > eps)
    else:
        inside = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
    lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
    return ii[inside], jj[inside], lam


def _build_binding(mesh: Mesh, s: int):
    mask = np.zeros((s, s), dtype=bool)
    face_idx = np.full((s, s), -1, dtype=np.int32)
    bary = np.zeros((s, s, 3), dtype=np.float64)
    for f in range(len(mesh.faces)):
        ii, jj, lam = _texels_in_triangle(mesh.uvs[mesh.faces[f]], s)
        fresh = ~mask[ii, jj]  # first claim wins; deterministic in face order
        ii, jj, lam = ii[fresh], jj[fresh], lam[fresh]
        mask[ii, jj] = True
        face_idx[ii, jj] = f
        bary[ii, jj] = lam
    return mask, face_idx, bary


# ---------------------------------------------------------------------------
# Deformation and UV position maps
# ---------------------------------------------------------------------------

def deform(mesh: Mesh, expr: np.ndarray) -> np.ndarray:
    """Rest vertices plus the expression-weighted sum of blendshape offsets.

    Expression entries beyond the blendshape count are ignored.
    """
    b = mesh.blendshape_count
    expr = np.asarray(expr, dtype=np.float64)
    if expr.ndim != 1 or len(expr) < b:
        raise DataError(
            f"expression vector needs at least {b} coefficients, got shape {expr.shape}"
        )
    if b == 0:
        return mesh.vertices.copy()
    return mesh.vertices + np.tensordot(expr[:b], mesh.blendshapes, axes=(0, 0))


@dataclass
class UVPositionMap:
    positions: np.ndarray  # (S, S, 3); exactly zero where mask is False
    mask: np.ndarray       # (S, S) bool

    @property
    def resolution(self) -> int:
        return self.mask.shape[0]


def rasterize_uv(mesh: Mesh, deformed_vertices: np.ndarray, target_s: int) -> UVPositionMap:
    """Barycentric-interpolate deformed vertex positions into UV texels."""
    mask, face_idx, bary = mesh.raster_binding(target_s)
    positions = np.zeros((target_s, target_s, 3), dtype=np.float64)
    if mask.any():
        faces = mesh.faces[face_idx[mask]]          # (N, 3)
        corners = deformed_vertices[faces]          # (N, 3, 3)
        positions[mask] = np.einsum("nk,nkd->nd", bary[mask], corners)
    return UVPositionMap(positions=positions, mask=mask)


def gaussian_count(pmap: UVPositionMap) -> int:
    """Number of covered texels, i.e. Gaussians instantiated at this resolution."""
    return int(pmap.mask.sum())


def positional_encode(pmap: UVPositionMap, n_freq: int,
                      center=None, radius: float = 1.0) -> np.ndarray:
    """Fourier-feature encode texel positions: [p, sin(2^k p), cos(2^k p)]_k.

    Positions are first centered and scaled (by the rest-pose bounding sphere
    in the pipeline) so the high frequencies do not alias on arbitrary scene
    units. Covered texels get 3 + 6 * n_freq channels; masked-out texels
    encode the zero vector.
    """
    if n_freq < 0:
        raise ValueError(f"n_freq must be non-negative, got {n_freq}")
    s = pmap.resolution
    p = pmap.positions
    if center is not None:
        p = (p - np.asarray(center)) / radius
    chunks = [p]
    for k in range(n_freq):
        arg = p * (2.0 ** k)
        chunks.append(np.sin(arg))
        chunks.append(np.cos(arg))
    out = np.concatenate(chunks, axis=2)
    out[~pmap.mask] = 0.0
    return out


def texel_spacing(pmap: UVPositionMap) -> float:
    """Mean 3D distance between adjacent covered texels (Gaussian footprint scale)."""
    pos, mask = pmap.positions, pmap.mask
    dists = []
    pair_r = mask[:-1, :] & mask[1:, :]
    if pair_r.any():
        d = np.linalg.norm(pos[:-1][pair_r] - pos[1:][pair_r], axis=1)
        dists.append(d)
    pair_d = mask[:, :-1] & mask[:, 1:]
    if pair_d.any():
        d = np.linalg.norm(pos[:, :-1][pair_d] - pos[:, 1:][pair_d], axis=1)
        dists.append(d)
    if not dists:
        return 1e-3
    all_d = np.concatenate(dists)
    all_d = all_d[all_d > 0]
    return float(all_d.mean()) if len(all_d) else 1e-3


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-8:
            raise ValueError(f"rotation is not orthonormal (deviation {err:.2e})")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def look_at_camera(position, target, width: int, height: int,
                   fov_deg: float = 40.0, up=(0.0, 1.0, 0.0)) -> Camera:
    """Camera at `position` looking at `target`; +z forward, +y image-down."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height,
                  rotation=rot, translation=-rot @ position)


def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _orbit_once(cam: Camera, axis: np.ndarray, angle: float, center: np.ndarray) -> Camera:
    if angle == 0.0:
        return cam
    a = _axis_rotation(axis, angle)
    pos = center + a @ (cam.position - center)
    rot = cam.rotation @ a.T
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  width=cam.width, height=cam.height,
                  rotation=rot, translation=-rot @ pos, near=cam.near)


def orbit_camera(base: Camera, yaw: float, pitch: float, center=(0.0, 0.0, 0.0)) -> Camera:
    """Rigidly orbit the camera about `center`, keeping its distance fixed.

    Yaw rotates about the world up axis; pitch then rotates about the yawed
    camera's right axis, so successive yaws compose additively.
    """
    center = np.asarray(center, dtype=np.float64)
    cam = _orbit_once(base, np.array([0.0, 1.0, 0.0]), yaw, center)
    if pitch != 0.0:
        cam = _orbit_once(cam, cam.rotation[0], pitch, center)
    return cam


# ---------------------------------------------------------------------------
# Desk mesh: procedural UV sphere standing in for a head model
# ---------------------------------------------------------------------------

def build_desk_mesh(rows: int = 24, cols: int = 32, n_blendshapes: int = 8,
                    seed: int = 0, radius: float = 1.0,
                    uv_margin: float = 0.03) -> Mesh:
    """UV sphere with an inset equirectangular chart and sinusoidal blendshapes.

    Pole rows collapse in 3D but stay non-degenerate in UV, so every texel of
    the chart still binds to a well-defined surface point.
    """
    vs = np.linspace(0.0, 1.0, rows + 1)
    us = np.linspace(0.0, 1.0, cols + 1)
    uu, vv = np.meshgrid(us, vs, indexing="ij")   # (cols+1, rows+1)
    phi = uu * 2.0 * math.pi
    theta = vv * math.pi
    x = radius * np.sin(theta) * np.cos(phi)
    y = radius * np.cos(theta)
    z = radius * np.sin(theta) * np.sin(phi)
    vertices = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    span = 1.0 - 2.0 * uv_margin
    uvs = np.stack([uv_margin + uu * span, uv_margin + vv * span], axis=-1).reshape(-1, 2)

    def vid(i, j):
        return i * (rows + 1) + j

    faces = []
    for i in range(cols):
        for j in range(rows):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    faces = np.asarray(faces, dtype=np.int32)

    rng = np.random.default_rng(seed)
    normals = vertices / radius
    shapes = np.zeros((n_blendshapes, len(vertices), 3))
    for k in range(n_blendshapes):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(1.5, 4.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        bump = np.sin(freq * (vertices @ direction) + phase)
        shapes[k] = 0.06 * radius * bump[:, None] * normals
    return Mesh(vertices=vertices, faces=faces, uvs=uvs, blendshapes=shapes)


# ---------------------------------------------------------------------------
# Mesh file IO: OBJ (positions, per-vertex UVs, faces) + blendshape sidecar
# ---------------------------------------------------------------------------

def save_mesh(mesh: Mesh, obj_path: str | Path, blend_path: str | Path):
    obj_path, blend_path = Path(obj_path), Path(blend_path)
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for t in mesh.uvs:
        lines.append(f"vt {t[0]:.17g} {t[1]:.17g}")
    for f in mesh.faces:
        a, b, c = (int(i) + 1 for i in f)
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
    obj_path.write_text("\n".join(lines) + "\n")

    with open(blend_path, "wb") as fh:
        fh.write(struct.pack("<I", mesh.blendshape_count))
        fh.write(mesh.blendshapes.astype("<f4").tobytes())


def load_mesh(obj_path: str | Path, blend_path: str | Path | None = None) -> Mesh:
    obj_path = Path(obj_path)
    if not obj_path.is_file():
        raise DataError(f"mesh file not found: {obj_path}")
    verts, uvs, faces = [], [], []
    for lineno, line in enumerate(obj_path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise DataError(f"{obj_path}:{lineno}: only triangle faces supported")
            idx = []
            for token in parts[1:]:
                sub = token.split("/")
                vi = int(sub[0]) - 1
                if len(sub) > 1 and sub[1] and int(sub[1]) - 1 != vi:
                    raise DataError(
                        f"{obj_path}:{lineno}: UV index must match vertex index "
                        "(per-vertex UVs required)"
                    )
                idx.append(vi)
            faces.append(idx)
    verts = np.asarray(verts, dtype=np.float64)
    uvs_arr = np.asarray(uvs, dtype=np.float64)
    if len(uvs_arr) != len(verts):
        raise DataError(f"{obj_path}: expected one vt per vertex")
    faces = np.asarray(faces, dtype=np.int32)

    if blend_path is None:
        shapes = np.zeros((0, len(verts), 3))
    else:
        blend_path = Path(blend_path)
        if not blend_path.is_file():
            raise DataError(f"blendshape sidecar not found: {blend_path}")
        raw = blend_path.read_bytes()
        if len(raw) < 4:
            raise DataError(f"{blend_path}: truncated blendshape sidecar")
        (count,) = struct.unpack("<I", raw[:4])
        expected = 4 + count * len(verts) * 3 * 4
        if len(raw) != expected:
            raise DataError(
                f"{blend_path}: expected {expected} bytes for {count} bases, got {len(raw)}"
            )
        shapes = np.frombuffer(raw[4:], dtype="<f4").astype(np.float64)
        shapes = shapes.reshape(count, len(verts), 3)
    return Mesh(vertices=verts, faces=faces, uvs=uvs_arr, blendshapes=shapes)
