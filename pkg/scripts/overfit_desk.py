"""End-to-end desk run: generate data, train both stages, evaluate the LOD axis.

Writes the dataset, checkpoint, loss curves, an LOD sweep and a benchmark CSV
into the chosen output directory, then prints a quality/speed summary.

Usage: python scripts/overfit_desk.py [--out runs/desk] [--config cfg.txt]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from alod.bench import run_bench, write_bench_csv
from alod.checkpoint import save_checkpoint
from alod.config import TrainConfig, load_config
from alod.dataset import generate_synthetic_dataset
from alod.metrics import psnr, ssim
from alod.model import build_model, forward_frame
from alod.trainer import train_stage1, train_stage2, write_curves


def frame_metrics(model, frames, lod):
    ps, ss = [], []
    for sample in frames:
        fwd = forward_frame(model, sample.expr, sample.camera, lod)
        img = np.clip(fwd.image, 0.0, 1.0)
        ps.append(psnr(sample.image, img))
        ss.append(ssim(sample.image, img))
    return float(np.mean(ps)), float(np.mean(ss))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--config", default=None)
    args = parser.parse_args()

    cfg = load_config(args.config) if args.config else TrainConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    ds = generate_synthetic_dataset(cfg, out / "data")
    print(f"[{time.time() - t0:7.1f}s] dataset: {len(ds.frames)} frames")

    model = build_model(cfg, ds.mesh, np.random.default_rng(cfg.seed))
    curve = train_stage1(model, ds.frames, log_every=200)
    print(f"[{time.time() - t0:7.1f}s] stage 1 done "
          f"({curve[0].total:.4f} -> {curve[-1].total:.4f})")
    p0, s0 = frame_metrics(model, ds.frames, 0.0)
    p1s, s1s = frame_metrics(model, ds.frames, 1.0)
    print(f"          after stage 1: l=0 psnr {p0:.2f} ssim {s0:.4f} | "
          f"l=1 psnr {p1s:.2f} ssim {s1s:.4f}")

    curve += train_stage2(model, ds.frames, log_every=300)
    print(f"[{time.time() - t0:7.1f}s] stage 2 done")
    save_checkpoint(model, out / "model.alod")
    write_curves(curve, out / "curves.csv")

    p0, s0 = frame_metrics(model, ds.frames, 0.0)
    p1, s1 = frame_metrics(model, ds.frames, 1.0)
    print(f"final: l=0 psnr {p0:.2f} ssim {s0:.4f}")
    print(f"final: l=1 psnr {p1:.2f} ssim {s1:.4f} "
          f"(drops: psnr {100 * (1 - p1 / p0):.2f}%% ssim {100 * (1 - s1 / s0):.2f}%%)")

    # lod sweep on frame 0
    sample = ds.frames[0]
    top = np.clip(forward_frame(model, sample.expr, sample.camera, 0.0).image, 0, 1)
    print("lod sweep (frame 0, psnr vs l=0):")
    prev = None
    for lod in np.arange(0.0, 1.0001, 0.05):
        fwd = forward_frame(model, sample.expr, sample.camera, float(lod))
        value = psnr(top, np.clip(fwd.image, 0, 1))
        step = "" if prev is None or lod < 0.075 else f"  (step {prev - value:+.2f} dB)"
        print(f"  l={lod:4.2f} count={len(fwd.gaussians):5d} psnr={value:6.2f}{step}")
        prev = value

    rows = run_bench(model, ds.frames, [0.0, 0.25, 0.5, 0.75, 1.0],
                     warmup=1, iters=3)
    write_bench_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"  bench l={r.lod:4.2f}: {r.gaussian_count:5d} gaussians "
              f"{r.mean_ms:7.2f} ms ({r.fps:6.1f} fps)")
    print(f"[{time.time() - t0:7.1f}s] all artifacts in {out}")


if __name__ == "__main__":
    main()
