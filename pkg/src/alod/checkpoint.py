"""Binary checkpoint format for a trained avatar.

Layout (little-endian), version 1:

  magic   4 bytes  "ALOD"
  version u32      1
  config  u32 length + UTF-8 key=value text (strict parse on load)
  mesh    u32 V, u32 F, u32 B; f64 vertices (V*3); f64 uvs (V*2);
          u32 faces (F*3); f32 blendshapes (B*V*3)
  field   u32 level count; per level: u32 resolution, u32 channels,
          f32 data row-major
  nets    mapper, then heads offset/scale/rotation/opacity/color, each:
          u32 layer count; per layer: u32 in, u32 out, u8 activation tag,
          f32 weights row-major (out, in), f32 bias

No trailing bytes allowed. Every failure mode raises a distinct exception:
wrong magic, unknown version, short file, or inconsistent contents.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, config_to_text, parse_config_text
from .decoder import DecoderHeads, HEAD_NAMES, head_output_dims
from .geometry import Mesh
from .model import AvatarModel
from .nn import ACTIVATIONS, DenseLayer, MlpNetwork
from .uv_field import FeatureField, FeatureMap

MAGIC = b"ALOD"
VERSION = 1

_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}
_TAG_ACT = dict(enumerate(ACTIVATIONS))


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared contents."""


class CheckpointFormatError(CheckpointError):
    """Contents are structurally invalid or internally inconsistent."""


def _net_bytes(net: MlpNetwork) -> bytes:
    parts = [struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim,
                                 _ACT_TAG[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: AvatarModel, path: str | Path):
    mesh = model.mesh
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg_text = config_to_text(model.config).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg_text)))
    parts.append(cfg_text)

    parts.append(struct.pack("<III", len(mesh.vertices), len(mesh.faces),
                             mesh.blendshape_count))
    parts.append(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(mesh.uvs, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(mesh.faces, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(mesh.blendshapes, dtype="<f4").tobytes())

    parts.append(struct.pack("<I", len(model.field.levels)))
    for level in model.field.levels:
        parts.append(struct.pack("<II", level.resolution, level.channels))
        parts.append(np.ascontiguousarray(level.data, dtype="<f4").tobytes())

    parts.append(_net_bytes(model.mapper))
    for name in HEAD_NAMES:
        parts.append(_net_bytes(getattr(model.heads, name)))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointTruncatedError(
                f"{self.path}: truncated (wanted {n} bytes at offset {self.off}, "
                f"file has {len(self.raw)})")
        chunk = self.raw[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def array(self, dtype: str, count: int, shape) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype).reshape(shape).copy()

    def done(self):
        if self.off != len(self.raw):
            raise CheckpointFormatError(
                f"{self.path}: {len(self.raw) - self.off} trailing bytes")


def _read_net(reader: _Reader, dtype) -> MlpNetwork:
    n_layers = reader.u32()
    if not 1 <= n_layers <= 64:
        raise CheckpointFormatError(f"{reader.path}: implausible layer count {n_layers}")
    layers = []
    for _ in range(n_layers):
        in_dim = reader.u32()
        out_dim = reader.u32()
        tag = reader.u8()
        if tag not in _TAG_ACT:
            raise CheckpointFormatError(f"{reader.path}: unknown activation tag {tag}")
        if not (1 <= in_dim <= 1 << 20 and 1 <= out_dim <= 1 << 20):
            raise CheckpointFormatError(f"{reader.path}: implausible layer dims")
        w = reader.array("<f4", in_dim * out_dim, (out_dim, in_dim)).astype(dtype)
        b = reader.array("<f4", out_dim, (out_dim,)).astype(dtype)
        layers.append(DenseLayer(weights=w, bias=b, activation=_TAG_ACT[tag]))
    try:
        return MlpNetwork(layers)
    except ValueError as exc:
        raise CheckpointFormatError(f"{reader.path}: {exc}") from exc


def load_checkpoint(path: str | Path, dtype=np.float32) -> AvatarModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic, not an avatar checkpoint")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {version} (expected {VERSION})")

    cfg_len = reader.u32()
    try:
        cfg = parse_config_text(reader.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointFormatError(f"{path}: invalid config block: {exc}") from exc

    n_v = reader.u32()
    n_f = reader.u32()
    n_b = reader.u32()
    if n_v > 1 << 24 or n_f > 1 << 24 or n_b > 1 << 10:
        raise CheckpointFormatError(f"{path}: implausible mesh sizes")
    vertices = reader.array("<f8", n_v * 3, (n_v, 3))
    uvs = reader.array("<f8", n_v * 2, (n_v, 2))
    faces = reader.array("<u4", n_f * 3, (n_f, 3)).astype(np.int32)
    shapes = reader.array("<f4", n_b * n_v * 3, (n_b, n_v, 3)).astype(np.float64)
    try:
        mesh = Mesh(vertices=vertices, faces=faces, uvs=uvs, blendshapes=shapes)
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: invalid mesh block: {exc}") from exc

    n_levels = reader.u32()
    if n_levels != cfg.n_levels:
        raise CheckpointFormatError(
            f"{path}: field has {n_levels} levels, config says {cfg.n_levels}")
    levels = []
    for _ in range(n_levels):
        res = reader.u32()
        ch = reader.u32()
        if not (1 <= res <= 1 << 14 and 1 <= ch <= 1 << 12):
            raise CheckpointFormatError(f"{path}: implausible level shape")
        levels.append(FeatureMap(reader.array("<f4", res * res * ch,
                                              (res, res, ch)).astype(dtype)))
    try:
        field = FeatureField(levels, tau=cfg.tau)
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: invalid field block: {exc}") from exc

    mapper = _read_net(reader, dtype)
    heads = {}
    for name in HEAD_NAMES:
        heads[name] = _read_net(reader, dtype)
    reader.done()

    _check_consistency(path, cfg, field, mapper, heads)
    return AvatarModel(config=cfg, mesh=mesh, field=field, mapper=mapper,
                       heads=DecoderHeads(**heads))


def _check_consistency(path, cfg, field, mapper, heads):
    if field.resolutions[0] != cfg.s_min or field.resolutions[-1] != cfg.s_max:
        raise CheckpointFormatError(
            f"{path}: field resolutions {field.resolutions} do not span "
            f"[{cfg.s_min}, {cfg.s_max}]")
    if field.channels != cfg.d_f:
        raise CheckpointFormatError(
            f"{path}: field channels {field.channels} != configured d_f {cfg.d_f}")
    if mapper.in_dim != cfg.expr_dim or mapper.out_dim != cfg.k_driving:
        raise CheckpointFormatError(
            f"{path}: mapper dims ({mapper.in_dim}->{mapper.out_dim}) do not "
            f"match config ({cfg.expr_dim}->{cfg.k_driving})")
    for name, expected in head_output_dims(cfg.sh_coeff_count).items():
        net = heads[name]
        if net.in_dim != cfg.latent_channels or net.out_dim != expected:
            raise CheckpointFormatError(
                f"{path}: head '{name}' dims ({net.in_dim}->{net.out_dim}) do "
                f"not match config ({cfg.latent_channels}->{expected})")
