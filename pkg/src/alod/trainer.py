"""Two-stage training loop.

Stage one trains the feature field, the mapping network and the decoder heads
at the highest detail level (lod 0) to capture fine structure. Stage two
freezes the mapping network and, at every step, accumulates gradients over
several lod draws (always including both endpoints 0 and 1 plus uniform
samples) so the decoder and field adapt across the whole detail range.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .dataset import FrameSample
from .losses import LossBreakdown, LossWeights, total_loss
from .model import AvatarModel, backward_frame, forward_frame
from .nn import Adam


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; training aborted."""


@dataclass
class CurveRow:
    stage: int
    step: int
    total: float
    rgb: float
    parts: float
    mu: float
    s: float
    lods: tuple


def loss_weights(cfg: TrainConfig) -> LossWeights:
    return LossWeights(lambda_parts=cfg.lambda_parts,
                       lambda_lpips=cfg.lambda_lpips,
                       lambda_mu=cfg.lambda_mu,
                       lambda_s=cfg.lambda_s,
                       huber_delta=cfg.huber_delta)


def compute_frame_gradients(model: AvatarModel, sample: FrameSample, lod: float,
                            weights: LossWeights | None = None,
                            train_mapper: bool = True,
                            perceptual_hook=None):
    """One full forward/backward for a single frame at a single lod."""
    weights = weights or loss_weights(model.config)
    fwd = forward_frame(model, sample.expr, sample.camera, lod, want_cache=True)
    dtype = fwd.image.dtype
    target = sample.image.astype(dtype)
    breakdown, grad_image, attr_reg = total_loss(
        target, fwd.image, sample.part_mask, fwd.gaussians, fwd.pmap,
        lod, weights, perceptual_hook=perceptual_hook)
    grads = backward_frame(model, fwd, grad_image.astype(dtype), attr_reg,
                           train_mapper=train_mapper)
    return grads, breakdown


def accumulate_grads(total: dict, grads: dict, scale: float = 1.0):
    for name, g in grads.items():
        if name in total:
            total[name] += scale * g
        else:
            total[name] = scale * g if scale != 1.0 else g.copy()
    return total


def make_optimizer(model: AvatarModel, include_mapper: bool = True) -> Adam:
    cfg = model.config
    params = {name: arr for name, arr in model.parameters().items()
              if include_mapper or not name.startswith("mapper.")}

    def lr_for(name: str) -> float:
        return cfg.lr_field if name.startswith("field.") else cfg.lr

    return Adam(params, lr_for)


def _guard_finite(breakdown: LossBreakdown, stage: int, step: int):
    if not np.isfinite(breakdown.total):
        raise TrainingDivergence(
            f"non-finite loss at stage {stage} step {step}: {breakdown.total}")


def train_stage1(model: AvatarModel, frames: list[FrameSample],
                 cfg: TrainConfig | None = None,
                 log_every: int = 0, perceptual_hook=None) -> list[CurveRow]:
    """Optimize field, mapper and heads at lod 0 for cfg.stage1_steps."""
    cfg = cfg or model.config
    if not frames:
        raise ValueError("stage one needs a non-empty dataset")
    weights = loss_weights(cfg)
    optimizer = make_optimizer(model, include_mapper=True)
    curve = []
    for step in range(cfg.stage1_steps):
        sample = frames[step % len(frames)]
        grads, breakdown = compute_frame_gradients(model, sample, 0.0, weights,
                                                   train_mapper=True,
                                                   perceptual_hook=perceptual_hook)
        _guard_finite(breakdown, 1, step)
        optimizer.step(grads)
        curve.append(CurveRow(stage=1, step=step, total=breakdown.total,
                              rgb=breakdown.rgb_full, parts=breakdown.rgb_parts,
                              mu=breakdown.mu, s=breakdown.s, lods=(0.0,)))
        if log_every and step % log_every == 0:
            print(f"[stage1 {step:5d}] loss {breakdown.total:.5f} "
                  f"rgb {breakdown.rgb:.5f}")
    return curve


def stage2_lods(rng: np.random.Generator, k: int) -> list[float]:
    """Endpoint-anchored lod draws: 0, 1, then uniform samples."""
    lods = [0.0, 1.0][:k]
    while len(lods) < k:
        lods.append(float(rng.uniform(0.0, 1.0)))
    return lods


def train_stage2(model: AvatarModel, frames: list[FrameSample],
                 cfg: TrainConfig | None = None,
                 log_every: int = 0, perceptual_hook=None) -> list[CurveRow]:
    """Accumulate gradients over lod draws per step; the mapping network stays fixed."""
    cfg = cfg or model.config
    if not frames:
        raise ValueError("stage two needs a non-empty dataset")
    weights = loss_weights(cfg)
    optimizer = make_optimizer(model, include_mapper=False)
    rng = np.random.default_rng(cfg.seed + 1)
    scale = 1.0 / cfg.lods_per_step if cfg.lod_accumulate == "mean" else 1.0
    curve = []
    for step in range(cfg.stage2_steps):
        sample = frames[step % len(frames)]
        lods = stage2_lods(rng, cfg.lods_per_step)
        total_grads: dict = {}
        agg = dict(total=0.0, rgb=0.0, parts=0.0, mu=0.0, s=0.0)
        for lod in lods:
            grads, breakdown = compute_frame_gradients(
                model, sample, lod, weights, train_mapper=False,
                perceptual_hook=perceptual_hook)
            _guard_finite(breakdown, 2, step)
            accumulate_grads(total_grads, grads, scale)
            agg["total"] += breakdown.total
            agg["rgb"] += breakdown.rgb_full
            agg["parts"] += breakdown.rgb_parts
            agg["mu"] += breakdown.mu
            agg["s"] += breakdown.s
        optimizer.step(total_grads)
        curve.append(CurveRow(stage=2, step=step, total=agg["total"],
                              rgb=agg["rgb"], parts=agg["parts"],
                              mu=agg["mu"], s=agg["s"], lods=tuple(lods)))
        if log_every and step % log_every == 0:
            print(f"[stage2 {step:5d}] loss {agg['total']:.5f}")
    return curve


def train(model: AvatarModel, frames: list[FrameSample],
          log_every: int = 0) -> list[CurveRow]:
    curve = train_stage1(model, frames, log_every=log_every)
    curve += train_stage2(model, frames, log_every=log_every)
    return curve


def write_curves(rows: list[CurveRow], path: str | Path):
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "step", "total", "rgb", "parts", "mu", "s",
                         "lod_values"])
        for row in rows:
            writer.writerow([row.stage, row.step, f"{row.total:.8g}",
                             f"{row.rgb:.8g}", f"{row.parts:.8g}",
                             f"{row.mu:.8g}", f"{row.s:.8g}",
                             ";".join(f"{l:.4g}" for l in row.lods)])
