"""AvatarModel: the trainable unit, plus forward/backward over the full chain.

Forward per frame: expression -> driving code; mesh deform -> UV position map
at the LOD's resolution; field resample -> feature map; latent assembly;
five-head decode -> GaussianSet; splat render. Backward routes the image
adjoint through the same chain back to the feature-field levels, the decoder
heads and (in stage one) the mapping network.

Parameters live in a flat name -> array registry so the optimizer, gradient
accumulation and the checkpoint all agree on ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import TrainConfig
from .decoder import (DecoderHeads, DecodeCache, LatentMap, assemble_latent,
                      build_heads, decode, decode_backward,
                      map_driving_code_cached, split_latent_rows_grad,
                      HEAD_NAMES)
from .geometry import Camera, Mesh, UVPositionMap, deform, positional_encode, \
    rasterize_uv, texel_spacing
from .splat import AttributeGrads, GaussianSet, RenderSettings, render, \
    render_backward
from .uv_field import FeatureField, init_field, resample_with_cache, \
    resample_backward, resolution_for_lod


@dataclass
class AvatarModel:
    config: TrainConfig
    mesh: Mesh
    field: FeatureField
    mapper: nn.MlpNetwork
    heads: DecoderHeads
    norm_center: np.ndarray = None
    norm_radius: float = 0.0

    def __post_init__(self):
        if self.norm_center is None:
            self.norm_center, self.norm_radius = self.mesh.bounding_sphere()
        if self.mapper.in_dim != self.config.expr_dim:
            raise ValueError("mapper input does not match configured expr_dim")
        if self.field.resolutions[0] != self.config.s_min \
                or self.field.resolutions[-1] != self.config.s_max:
            raise ValueError("field resolutions do not match configured s_min/s_max")

    @property
    def offset_scale(self) -> float:
        return self.config.offset_scale_frac * self.norm_radius

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, level in enumerate(self.field.levels):
            params[f"field.level{i}"] = level.data
        for i, layer in enumerate(self.mapper.layers):
            params[f"mapper.l{i}.w"] = layer.weights
            params[f"mapper.l{i}.b"] = layer.bias
        for name in HEAD_NAMES:
            net = getattr(self.heads, name)
            for i, layer in enumerate(net.layers):
                params[f"heads.{name}.l{i}.w"] = layer.weights
                params[f"heads.{name}.l{i}.b"] = layer.bias
        return params

    def render_settings(self) -> RenderSettings:
        bg = (1.0, 1.0, 1.0) if self.config.background == "white" else (0.0, 0.0, 0.0)
        # small tiles win on small desk images; 16 px is the large-image default
        tile = 8 if self.config.image_size <= 128 else 16
        return RenderSettings(background=bg, tile_size=tile)


def build_model(cfg: TrainConfig, mesh: Mesh, rng: np.random.Generator,
                dtype=np.float32) -> AvatarModel:
    field_obj = init_field(cfg.level_resolutions(), cfg.d_f, rng,
                           tau=cfg.tau, dtype=dtype)
    mapper = nn.build_mlp([cfg.expr_dim, cfg.mapper_hidden, cfg.k_driving],
                          "tanh", "identity", rng, dtype=dtype)
    heads = build_heads(cfg.latent_channels, cfg.head_hidden, cfg.head_layers,
                        cfg.sh_coeff_count, rng, dtype=dtype)
    return AvatarModel(config=cfg, mesh=mesh, field=field_obj,
                       mapper=mapper, heads=heads)


@dataclass
class FrameForward:
    image: np.ndarray
    gaussians: GaussianSet
    pmap: UVPositionMap
    latent: LatentMap
    code: np.ndarray
    lod: float
    resolution: int
    camera: Camera
    settings: RenderSettings
    mapper_cache: object = field(default=None, repr=False)
    decode_cache: DecodeCache = field(default=None, repr=False)
    render_cache: object = field(default=None, repr=False)

    @property
    def delta_mu(self) -> np.ndarray:
        init = self.pmap.positions[self.pmap.mask].astype(self.gaussians.mu.dtype)
        return self.gaussians.mu - init


def forward_frame(model: AvatarModel, expr: np.ndarray, camera: Camera,
                  lod: float, settings: RenderSettings | None = None,
                  want_cache: bool = False) -> FrameForward:
    cfg = model.config
    settings = settings or model.render_settings()
    dtype = model.field.levels[0].data.dtype

    code, mcache = map_driving_code_cached(model.mapper, expr)
    verts = deform(model.mesh, expr)
    s = resolution_for_lod(lod, cfg.s_max, cfg.s_min)
    pmap = rasterize_uv(model.mesh, verts, s)
    penc = positional_encode(pmap, cfg.n_freq, center=model.norm_center,
                             radius=model.norm_radius).astype(dtype)
    feat, _ = resample_with_cache(model.field, lod)
    latent = assemble_latent(feat, penc, code, lod, pmap.mask)
    scale_base = texel_spacing(pmap)
    decoded = decode(latent, pmap, model.heads, model.offset_scale,
                     scale_base, want_cache=want_cache)
    gauss, dcache = decoded if want_cache else (decoded, None)
    if want_cache:
        image, rcache = render(gauss, camera, settings, want_cache=True)
    else:
        image, rcache = render(gauss, camera, settings), None
    return FrameForward(image=image, gaussians=gauss, pmap=pmap, latent=latent,
                        code=code, lod=lod, resolution=s, camera=camera,
                        settings=settings, mapper_cache=mcache,
                        decode_cache=dcache, render_cache=rcache)


def backward_frame(model: AvatarModel, fwd: FrameForward,
                   grad_image: np.ndarray,
                   extra_attr_grads: AttributeGrads | None = None,
                   train_mapper: bool = True) -> dict[str, np.ndarray]:
    """Image adjoint (plus optional attribute regularizer adjoints) to parameter grads."""
    attr = render_backward(fwd.gaussians, fwd.camera, grad_image,
                           fwd.settings, cache=fwd.render_cache)
    if extra_attr_grads is not None:
        attr.mu = attr.mu + extra_attr_grads.mu
        attr.scale = attr.scale + extra_attr_grads.scale
        attr.quat = attr.quat + extra_attr_grads.quat
        attr.alpha = attr.alpha + extra_attr_grads.alpha
        attr.sh = attr.sh + extra_attr_grads.sh

    head_grads, d_rows = decode_backward(model.heads, fwd.decode_cache, attr)
    d_feat, d_code = split_latent_rows_grad(d_rows, fwd.latent)
    level_grads = resample_backward(model.field, fwd.lod, d_feat)

    grads: dict[str, np.ndarray] = {}
    for i, g in enumerate(level_grads):
        grads[f"field.level{i}"] = g
    for name in HEAD_NAMES:
        pgrads = head_grads[name]
        net = getattr(model.heads, name)
        for i in range(len(net.layers)):
            grads[f"heads.{name}.l{i}.w"] = pgrads[2 * i]
            grads[f"heads.{name}.l{i}.b"] = pgrads[2 * i + 1]
    if train_mapper:
        mgrads, _ = nn.backward(model.mapper, fwd.mapper_cache,
                                d_code[None, :].astype(d_rows.dtype))
        for i in range(len(model.mapper.layers)):
            grads[f"mapper.l{i}.w"] = mgrads[2 * i]
            grads[f"mapper.l{i}.b"] = mgrads[2 * i + 1]
    return grads


def zero_attr_grads(gset: GaussianSet) -> AttributeGrads:
    return AttributeGrads(mu=np.zeros_like(gset.mu),
                          scale=np.zeros_like(gset.scale),
                          quat=np.zeros_like(gset.quat),
                          alpha=np.zeros_like(gset.alpha),
                          sh=np.zeros_like(gset.sh))
