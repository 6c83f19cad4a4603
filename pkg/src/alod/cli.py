"""Command-line entry points.

Commands: generate-data, train, render, sweep, bench, export-gaussians.
Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import trainer
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .dataset import DataError, LoadedDataset, generate_synthetic_dataset, \
    load_dataset
from .geometry import orbit_camera
from .images import save_image
from .metrics import psnr
from .model import build_model, forward_frame
from .splat import export_gaussians_ply

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _parse_lods(spec: str) -> list[float]:
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"lod range must be start:stop:step, got {spec!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ConfigError("lod range step must be positive")
        values = list(np.arange(start, stop + step * 0.5, step))
    else:
        values = [float(p) for p in spec.split(",") if p.strip()]
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"lod {v} outside [0, 1]")
    return values


def _load_model_and_data(args) -> tuple:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    e = len(ds.frames[0].expr)
    if e != model.config.expr_dim:
        raise DataError(
            f"expression dimension mismatch: dataset provides E={e}, the "
            f"checkpoint was trained with E={model.config.expr_dim}")
    return model, ds


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    ds = generate_synthetic_dataset(cfg, args.out)
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    if args.generate:
        generate_synthetic_dataset(cfg, data_dir)
    ds = load_dataset(data_dir)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, ds.mesh, rng)

    curve = trainer.train_stage1(model, ds.frames, log_every=args.log_every)
    curve += trainer.train_stage2(model, ds.frames, log_every=args.log_every)
    save_checkpoint(model, args.out)
    if args.curves:
        trainer.write_curves(curve, args.curves)
    if curve:
        stage1 = [r for r in curve if r.stage == 1]
        if stage1:
            print(f"stage1 loss: {stage1[0].total:.5f} -> {stage1[-1].total:.5f}")
        stage2 = [r for r in curve if r.stage == 2]
        if stage2:
            print(f"stage2 loss: {stage2[0].total:.5f} -> {stage2[-1].total:.5f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _render_one(model, ds: LoadedDataset, frame_idx: int, lod: float,
                yaw_deg: float, pitch_deg: float):
    if not 0 <= frame_idx < len(ds.frames):
        raise DataError(f"frame {frame_idx} out of range (dataset has "
                        f"{len(ds.frames)} frames)")
    sample = ds.frames[frame_idx]
    camera = sample.camera
    if yaw_deg or pitch_deg:
        center, _ = model.mesh.bounding_sphere()
        camera = orbit_camera(camera, np.deg2rad(yaw_deg),
                              np.deg2rad(pitch_deg), center=center)
    fwd = forward_frame(model, sample.expr, camera, lod)
    return fwd


def cmd_render(args) -> int:
    if not 0.0 <= args.lod <= 1.0:
        raise ConfigError(f"lod {args.lod} outside [0, 1]")
    model, ds = _load_model_and_data(args)
    indices = range(len(ds.frames)) if args.all else [args.frame]
    out = Path(args.out)
    if args.all:
        out.mkdir(parents=True, exist_ok=True)
    for idx in indices:
        fwd = _render_one(model, ds, idx, args.lod, args.yaw, args.pitch)
        path = out / f"render_{idx:03d}.png" if args.all else out
        save_image(fwd.image, path)
        print(f"frame {idx}: lod {args.lod:.3g} resolution {fwd.resolution} "
              f"gaussians {len(fwd.gaussians)} -> {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, ds = _load_model_and_data(args)
    lods = _parse_lods(args.lods)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    top = _render_one(model, ds, args.frame, 0.0, args.yaw, args.pitch)
    top_img = np.clip(top.image, 0.0, 1.0)
    rows = []
    strip = []
    for lod in lods:
        fwd = _render_one(model, ds, args.frame, lod, args.yaw, args.pitch)
        img = np.clip(fwd.image, 0.0, 1.0)
        save_image(img, out_dir / f"lod_{lod:.2f}.png")
        rows.append((lod, len(fwd.gaussians), psnr(top_img, img)))
        strip.append(img)
    with open(out_dir / "sweep.csv", "w") as fh:
        fh.write("lod,gaussians,psnr_vs_lod0\n")
        for lod, count, value in rows:
            fh.write(f"{lod:.4g},{count},{value:.4f}\n")
    save_image(np.concatenate(strip, axis=1), out_dir / "strip.png")
    print(f"wrote {len(rows)} renders, sweep.csv and strip.png to {out_dir}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, ds = _load_model_and_data(args)
    lods = _parse_lods(args.lods)

    def run():
        return bench_mod.run_bench(model, ds.frames, lods,
                                   n_frames=args.frames, warmup=args.warmup,
                                   iters=args.iters)

    if args.serial:
        try:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=1):
                rows = run()
        except ImportError:
            rows = run()
    else:
        rows = run()
    bench_mod.write_bench_csv(rows, args.out)
    for r in rows:
        print(f"lod {r.lod:.2f}: {r.gaussian_count:6d} gaussians, "
              f"{r.mean_ms:8.2f} ms ({r.fps:7.2f} fps)")
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_export_gaussians(args) -> int:
    if not 0.0 <= args.lod <= 1.0:
        raise ConfigError(f"lod {args.lod} outside [0, 1]")
    model, ds = _load_model_and_data(args)
    fwd = _render_one(model, ds, args.frame, args.lod, 0.0, 0.0)
    export_gaussians_ply(fwd.gaussians, args.out)
    print(f"exported {len(fwd.gaussians)} gaussians to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alod",
        description="Continuous level-of-detail Gaussian avatar engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    p.add_argument("--config", help="key=value config file (defaults if omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train an avatar and write a checkpoint")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--generate", action="store_true",
                   help="generate the dataset into --data first")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--curves", help="optional loss-curve CSV path")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames at a chosen level of detail")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="dataset supplying expressions and cameras (any identity "
                        "with the same expression dimensionality)")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--all", action="store_true", help="render every frame")
    p.add_argument("--lod", type=float, default=0.0)
    p.add_argument("--yaw", type=float, default=0.0, help="orbit yaw in degrees")
    p.add_argument("--pitch", type=float, default=0.0, help="orbit pitch in degrees")
    p.add_argument("--out", required=True,
                   help="output PNG path (or directory with --all)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sweep", help="render one frame across a range of lods")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--lods", default="0.0:1.0:0.05",
                   help="start:stop:step or comma list (default 0.0:1.0:0.05)")
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="benchmark the lod-to-image path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lods", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--serial", action="store_true",
                   help="pin linear algebra to one thread for low-variance timing")
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-gaussians",
                       help="decode one frame and export a PLY point cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--lod", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_gaussians)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except trainer.TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
