"""Run configuration: one flat dataclass, parsed from a strict key=value text file.

Unknown keys, duplicate keys, and type errors are rejected loudly; a silently
ignored typo in a hyperparameter is the fastest way to lose a training run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration file or inconsistent configuration values."""


@dataclass
class TrainConfig:
    # reproducibility
    seed: int = 7

    # UV feature field
    s_max: int = 64
    s_min: int = 16
    n_levels: int = 3
    tau: float = 0.35
    d_f: int = 16

    # latent assembly / decoder
    n_freq: int = 6
    k_driving: int = 20
    expr_dim: int = 109
    sh_degree: int = 3
    mapper_hidden: int = 64
    head_hidden: int = 48
    head_layers: int = 2
    offset_scale_frac: float = 0.1

    # desk mesh / synthetic data
    mesh_rows: int = 24
    mesh_cols: int = 32
    n_blendshapes: int = 8
    gt_resolution: int = 40
    image_size: int = 64
    n_frames: int = 8
    cam_orbit: float = 0.25

    # training schedule
    stage1_steps: int = 2000
    stage2_steps: int = 3000
    lods_per_step: int = 5
    lod_accumulate: str = "sum"
    lr: float = 1e-3
    lr_field: float = 5e-3

    # losses
    huber_delta: float = 0.1
    lambda_parts: float = 20.0
    lambda_lpips: float = 0.05
    lambda_mu: float = 0.001
    lambda_s: float = 0.5

    # rendering
    background: str = "white"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.s_min > self.s_max:
            raise ConfigError(
                f"s_min ({self.s_min}) must not exceed s_max ({self.s_max})"
            )
        if self.s_min < 1:
            raise ConfigError(f"s_min must be positive, got {self.s_min}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.n_levels < 2:
            raise ConfigError(f"n_levels must be at least 2, got {self.n_levels}")
        for name in (
            "d_f", "n_freq", "k_driving", "expr_dim", "mapper_hidden",
            "head_hidden", "head_layers", "mesh_rows", "mesh_cols",
            "n_blendshapes", "gt_resolution", "image_size", "n_frames",
            "lods_per_step",
        ):
            if getattr(self, name) < 1 and name != "n_freq":
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_freq < 0:
            raise ConfigError(f"n_freq must be non-negative, got {self.n_freq}")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError(f"sh_degree must be in [0, 3], got {self.sh_degree}")
        if self.lod_accumulate not in ("sum", "mean"):
            raise ConfigError(
                f"lod_accumulate must be 'sum' or 'mean', got {self.lod_accumulate!r}"
            )
        if self.background not in ("white", "black"):
            raise ConfigError(
                f"background must be 'white' or 'black', got {self.background!r}"
            )
        for name in ("lambda_parts", "lambda_lpips", "lambda_mu", "lambda_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.huber_delta <= 0:
            raise ConfigError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.lr <= 0 or self.lr_field <= 0:
            raise ConfigError("learning rates must be positive")

    @property
    def sh_coeff_count(self) -> int:
        """Total SH coefficients per Gaussian: 3 color channels x (degree+1)^2 bands."""
        return 3 * (self.sh_degree + 1) ** 2

    @property
    def d_pe(self) -> int:
        return 3 + 2 * self.n_freq * 3

    @property
    def latent_channels(self) -> int:
        return self.d_pe + self.d_f + self.k_driving + 1

    def level_resolutions(self) -> list[int]:
        """Geometric ladder of level resolutions from s_min up to s_max."""
        if self.n_levels == 2:
            return [self.s_min, self.s_max]
        ratio = (self.s_max / self.s_min) ** (1.0 / (self.n_levels - 1))
        res = [self.s_min]
        for i in range(1, self.n_levels - 1):
            r = int(round(self.s_min * ratio**i))
            if r <= res[-1]:
                r = res[-1] + 1
            res.append(min(r, self.s_max - 1))
        res.append(self.s_max)
        if len(set(res)) != len(res):
            raise ConfigError(
                f"cannot fit {self.n_levels} strictly increasing levels "
                f"between s_min={self.s_min} and s_max={self.s_max}"
            )
        return res


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r}") from exc


def parse_config_text(text: str) -> TrainConfig:
    """Parse 'key = value' lines ('#' comments allowed) into a TrainConfig."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key '{key}'")
        values[key] = _coerce(key, raw)
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def config_to_text(cfg: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def replace(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return dataclasses.replace(cfg, **kwargs)
