"""Synthetic training data: procedural ground-truth Gaussians on the desk mesh.

The generator builds the desk mesh, binds one ground-truth Gaussian to every
covered texel of a fixed-resolution UV binding, colors them with a smooth
procedural texture, animates them with smooth random expression trajectories,
and renders each frame with the brute-force reference renderer. Targets are
therefore exactly representable by the avatar pipeline being trained.

On-disk layout (all little-endian):

  mesh.obj / mesh.blend.bin      mesh + blendshape sidecar (see geometry)
  frame_XXX.png / _mask.png      8-bit target image and detail-region mask
  frame_XXX.bin                  sidecar: u32 E, f32[E] expression, then
                                 f64 fx fy cx cy, u32 width height,
                                 f64[9] rotation row-major, f64[3] translation,
                                 f64 near
  gt_gaussians.npz               binding + attributes of the GT Gaussians
  manifest.json                  frame list and the generation config
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_to_text, parse_config_text
from .geometry import (Camera, DataError, Mesh, build_desk_mesh, deform,
                       load_mesh, orbit_camera, look_at_camera, rasterize_uv,
                       save_mesh, texel_spacing)
from .images import load_image, load_mask, save_image, save_mask
from .splat import SH_C0, GaussianSet, RenderSettings, render_reference


@dataclass
class FrameSample:
    image: np.ndarray      # (H, W, 3) in [0, 1]
    part_mask: np.ndarray  # (H, W) bool
    expr: np.ndarray       # (E,)
    camera: Camera

    def __post_init__(self):
        if self.image.shape[:2] != self.part_mask.shape:
            raise DataError("part mask is not aligned to the image")
        if not np.all(np.isfinite(self.expr)):
            raise DataError("expression vector contains non-finite values")


@dataclass
class LoadedDataset:
    mesh: Mesh
    frames: list[FrameSample]
    manifest: dict
    root: Path


def _procedural_color(rest_positions: np.ndarray, radius: float) -> np.ndarray:
    """Smooth low-frequency RGB texture over the surface, kept inside [0.1, 0.9]."""
    p = rest_positions / radius
    r = 0.5 + 0.28 * np.sin(2.1 * p[:, 0] + 0.8 * p[:, 1])
    g = 0.5 + 0.28 * np.sin(1.7 * p[:, 1] - 1.3 * p[:, 2] + 1.1)
    b = 0.5 + 0.28 * np.sin(1.9 * p[:, 2] + 1.5 * p[:, 0] + 2.3)
    rgb = np.stack([r, g, b], axis=1)
    return np.clip(rgb, 0.1, 0.9)


def _expression_trajectories(cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """(n_frames, expr_dim) smooth sinusoidal coefficients, clamped to [-1, 1]."""
    n = cfg.n_frames
    expr = np.zeros((n, cfg.expr_dim))
    times = np.arange(n) / max(n - 1, 1)
    for k in range(min(cfg.n_blendshapes, cfg.expr_dim)):
        amp = rng.uniform(0.25, 0.6)
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        expr[:, k] = np.clip(amp * np.sin(2.0 * np.pi * freq * times + phase),
                             -1.0, 1.0)
    return expr


def _gt_from_recipe(mesh: Mesh, recipe: dict, expr: np.ndarray) -> GaussianSet:
    """Instantiate the ground-truth GaussianSet for one expression."""
    s_gt = int(recipe["resolution"])
    verts = deform(mesh, expr)
    pmap = rasterize_uv(mesh, verts, s_gt)
    mu = pmap.positions[pmap.mask]
    return GaussianSet(mu=mu, scale=recipe["scale"], quat=recipe["quat"],
                       alpha=recipe["alpha"], sh=recipe["sh"])


def _build_recipe(mesh: Mesh, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    s_gt = cfg.gt_resolution
    rest = rasterize_uv(mesh, mesh.vertices, s_gt)
    n = int(rest.mask.sum())
    if n == 0:
        raise DataError("ground-truth binding has no covered texels")
    spacing = texel_spacing(rest)
    rgb = _procedural_color(rest.positions[rest.mask], mesh.bounding_sphere()[1])
    sh = np.zeros((n, 12))  # degree-1 content; higher-degree targets stay learnable
    sh[:, 0:3] = (rgb - 0.5) / SH_C0  # basis-major: DC coefficients first
    sh[:, 3:] = rng.normal(scale=0.02, size=(n, 9))
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    return {
        "resolution": s_gt,
        "scale": np.full((n, 3), 1.3 * spacing),
        "quat": quat,
        "alpha": np.full(n, 0.8),
        "sh": sh,
        "patch": _patch_selector(rest.positions[rest.mask]),
    }


def _patch_selector(rest_mu: np.ndarray) -> np.ndarray:
    """Designated detail region: a spherical cap of the rest surface."""
    direction = np.array([0.25, 0.3, 0.92])
    direction /= np.linalg.norm(direction)
    radial = rest_mu / np.maximum(np.linalg.norm(rest_mu, axis=1, keepdims=True), 1e-12)
    return radial @ direction > np.cos(0.55)


def _render_part_mask(gt: GaussianSet, patch: np.ndarray, camera: Camera) -> np.ndarray:
    """Project the designated patch: white splats on black, thresholded."""
    if not patch.any():
        return np.zeros((camera.height, camera.width), dtype=bool)
    sh = np.zeros((int(patch.sum()), 3))
    sh[:, :] = 0.5 / SH_C0  # flat white
    subset = GaussianSet(mu=gt.mu[patch], scale=gt.scale[patch],
                         quat=gt.quat[patch], alpha=np.full(int(patch.sum()), 0.95),
                         sh=sh)
    settings = RenderSettings(background=(0.0, 0.0, 0.0))
    img = render_reference(subset, camera, settings)
    return img.mean(axis=2) > 0.25


def _base_camera(mesh: Mesh, cfg: TrainConfig) -> Camera:
    center, radius = mesh.bounding_sphere()
    position = center + np.array([0.0, 0.0, 3.2 * radius])
    return look_at_camera(position, center, cfg.image_size, cfg.image_size)


def _frame_cameras(mesh: Mesh, cfg: TrainConfig) -> list[Camera]:
    base = _base_camera(mesh, cfg)
    center, _ = mesh.bounding_sphere()
    cams = []
    times = np.arange(cfg.n_frames) / max(cfg.n_frames - 1, 1)
    for t in times:
        yaw = cfg.cam_orbit * np.sin(2.0 * np.pi * t)
        pitch = 0.4 * cfg.cam_orbit * np.cos(2.0 * np.pi * t)
        cams.append(orbit_camera(base, float(yaw), float(pitch), center=center))
    return cams


def generate_synthetic_dataset(cfg: TrainConfig, out_dir: str | Path) -> LoadedDataset:
    """Generate and write a dataset; returns it loaded back from disk."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    mesh = build_desk_mesh(cfg.mesh_rows, cfg.mesh_cols, cfg.n_blendshapes,
                           seed=cfg.seed)
    save_mesh(mesh, out / "mesh.obj", out / "mesh.blend.bin")
    mesh = load_mesh(out / "mesh.obj", out / "mesh.blend.bin")  # train sees this exact mesh

    recipe = _build_recipe(mesh, cfg, rng)
    np.savez(out / "gt_gaussians.npz",
             resolution=recipe["resolution"], scale=recipe["scale"],
             quat=recipe["quat"], alpha=recipe["alpha"], sh=recipe["sh"],
             patch=recipe["patch"])

    expressions = _expression_trajectories(cfg, rng)
    cameras = _frame_cameras(mesh, cfg)
    bg = (1.0, 1.0, 1.0) if cfg.background == "white" else (0.0, 0.0, 0.0)
    settings = RenderSettings(background=bg)

    frame_entries = []
    for i in range(cfg.n_frames):
        gt = _gt_from_recipe(mesh, recipe, expressions[i])
        image = np.clip(render_reference(gt, cameras[i], settings), 0.0, 1.0)
        mask = _render_part_mask(gt, recipe["patch"], cameras[i])
        names = {"image": f"frame_{i:03d}.png",
                 "mask": f"frame_{i:03d}_mask.png",
                 "sidecar": f"frame_{i:03d}.bin"}
        save_image(image, out / names["image"])
        save_mask(mask, out / names["mask"])
        _write_sidecar(out / names["sidecar"], expressions[i], cameras[i])
        frame_entries.append(names)

    manifest = {
        "format": "alod-dataset-v1",
        "mesh": "mesh.obj",
        "blendshapes": "mesh.blend.bin",
        "gt_gaussians": "gt_gaussians.npz",
        "frames": frame_entries,
        "config": config_to_text(cfg),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return load_dataset(out)


def _write_sidecar(path: Path, expr: np.ndarray, cam: Camera):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(expr)))
        fh.write(expr.astype("<f4").tobytes())
        fh.write(struct.pack("<4d", cam.fx, cam.fy, cam.cx, cam.cy))
        fh.write(struct.pack("<2I", cam.width, cam.height))
        fh.write(cam.rotation.astype("<f8").tobytes())
        fh.write(cam.translation.astype("<f8").tobytes())
        fh.write(struct.pack("<d", cam.near))


def _read_sidecar(path: Path):
    raw = path.read_bytes()
    try:
        (e,) = struct.unpack_from("<I", raw, 0)
        off = 4
        expr = np.frombuffer(raw, dtype="<f4", count=e, offset=off).astype(np.float64)
        off += 4 * e
        fx, fy, cx, cy = struct.unpack_from("<4d", raw, off)
        off += 32
        width, height = struct.unpack_from("<2I", raw, off)
        off += 8
        rot = np.frombuffer(raw, dtype="<f8", count=9, offset=off).reshape(3, 3).copy()
        off += 72
        trans = np.frombuffer(raw, dtype="<f8", count=3, offset=off).copy()
        off += 24
        (near,) = struct.unpack_from("<d", raw, off)
        off += 8
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated frame sidecar") from exc
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in frame sidecar")
    cam = Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                 rotation=rot, translation=trans, near=near)
    return expr, cam


def load_dataset(data_dir: str | Path) -> LoadedDataset:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"dataset manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON") from exc
    if manifest.get("format") != "alod-dataset-v1":
        raise DataError(f"{manifest_path}: unknown dataset format")
    mesh = load_mesh(root / manifest["mesh"], root / manifest["blendshapes"])
    frames = []
    for entry in manifest["frames"]:
        expr, cam = _read_sidecar(root / entry["sidecar"])
        frames.append(FrameSample(
            image=load_image(root / entry["image"]),
            part_mask=load_mask(root / entry["mask"]),
            expr=expr, camera=cam))
    if not frames:
        raise DataError(f"{manifest_path}: dataset has no frames")
    return LoadedDataset(mesh=mesh, frames=frames, manifest=manifest, root=root)


def dataset_config(ds: LoadedDataset) -> TrainConfig:
    return parse_config_text(ds.manifest["config"])


def gt_gaussians_for_frame(ds: LoadedDataset, frame_idx: int) -> GaussianSet:
    """Rebuild the exact ground-truth Gaussians used to render a stored frame."""
    npz = np.load(ds.root / ds.manifest["gt_gaussians"])
    recipe = {key: npz[key] for key in ("resolution", "scale", "quat", "alpha", "sh")}
    return _gt_from_recipe(ds.mesh, recipe, ds.frames[frame_idx].expr)
