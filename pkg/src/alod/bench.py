"""LOD benchmark: wall-clock timing of resample + decode + render per frame."""

from __future__ import annotations

import csv
import platform
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FrameSample
from .metrics import l1, psnr, ssim
from .model import AvatarModel, forward_frame


@dataclass
class BenchRow:
    lod: float
    resolution: int
    gaussian_count: int
    mean_ms: float
    p50_ms: float
    fps: float
    psnr_vs_top: float
    ssim_vs_top: float
    l1_vs_top: float


def _environment_lines() -> list[str]:
    return [
        f"# platform: {platform.platform()}",
        f"# python: {platform.python_version()}",
        f"# numpy: {np.__version__}",
        f"# timer: time.perf_counter, image encoding excluded",
    ]


def run_bench(model: AvatarModel, frames: list[FrameSample], lods,
              n_frames: int = 1, warmup: int = 2, iters: int = 5) -> list[BenchRow]:
    """Time the lod-to-image path (resample + decode + render), warmup excluded.

    Quality columns compare each lod's render of the first measured frame
    against the lod-0 render of the same frame.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    lods = sorted(float(l) for l in lods)
    use = frames[:max(1, min(n_frames, len(frames)))]
    top = forward_frame(model, use[0].expr, use[0].camera, 0.0)
    top_image = np.clip(top.image, 0.0, 1.0)

    rows = []
    for lod in lods:
        times = []
        fwd = None
        for it in range(warmup + iters):
            for sample in use:
                t0 = time.perf_counter()
                fwd = forward_frame(model, sample.expr, sample.camera, lod)
                t1 = time.perf_counter()
                if it >= warmup:
                    times.append((t1 - t0) * 1000.0)
        first = forward_frame(model, use[0].expr, use[0].camera, lod)
        image = np.clip(first.image, 0.0, 1.0)
        mean_ms = float(np.mean(times))
        rows.append(BenchRow(
            lod=lod, resolution=first.resolution,
            gaussian_count=len(first.gaussians),
            mean_ms=mean_ms, p50_ms=float(statistics.median(times)),
            fps=1000.0 / mean_ms,
            psnr_vs_top=psnr(top_image, image),
            ssim_vs_top=ssim(top_image, image),
            l1_vs_top=l1(top_image, image)))
    return rows


def write_bench_csv(rows: list[BenchRow], path: str | Path):
    with open(Path(path), "w", newline="") as fh:
        for line in _environment_lines():
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["lod", "resolution", "gaussians", "mean_ms", "p50_ms",
                         "fps", "psnr_vs_lod0", "ssim_vs_lod0", "l1_vs_lod0"])
        for r in rows:
            writer.writerow([f"{r.lod:.4g}", r.resolution, r.gaussian_count,
                             f"{r.mean_ms:.4f}", f"{r.p50_ms:.4f}",
                             f"{r.fps:.3f}", f"{r.psnr_vs_top:.4f}",
                             f"{r.ssim_vs_top:.5f}", f"{r.l1_vs_top:.6f}"])
