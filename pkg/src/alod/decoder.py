"""Per-texel latent assembly and the five-head Gaussian attribute decoder.

Each covered UV texel contributes one latent row [penc | features | driving
code | lod] which five small MLPs decode into position offset, scales,
rotation, opacity and SH color. Raw head outputs are shaped into valid
Gaussian attributes:

  mu    = mu_init + offset_scale * tanh(raw)    bounded offsets
  s     = scale_base * exp(raw)                 positive, LOD-aware baseline
  q     = normalize(raw + (1, 0, 0, 0))         unit, identity at zero
  alpha = sigmoid(raw)                          inside (0, 1)
  c     = raw                                   SH coefficients

Masked-out texels produce no Gaussian at all; the Gaussian count equals the
covered-texel count of the UV position map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .geometry import UVPositionMap
from .splat import GaussianSet, AttributeGrads
from .uv_field import FeatureMap

HEAD_NAMES = ("offset", "scale", "rotation", "opacity", "color")


@dataclass
class DecoderHeads:
    offset: nn.MlpNetwork
    scale: nn.MlpNetwork
    rotation: nn.MlpNetwork
    opacity: nn.MlpNetwork
    color: nn.MlpNetwork

    def as_dict(self):
        return {name: getattr(self, name) for name in HEAD_NAMES}


def head_output_dims(sh_coeff_count: int) -> dict[str, int]:
    return {"offset": 3, "scale": 3, "rotation": 4, "opacity": 1,
            "color": sh_coeff_count}


def build_heads(latent_channels: int, hidden: int, layers: int,
                sh_coeff_count: int, rng: np.random.Generator,
                dtype=np.float32) -> DecoderHeads:
    nets = {}
    for name, out_dim in head_output_dims(sh_coeff_count).items():
        dims = [latent_channels] + [hidden] * layers + [out_dim]
        nets[name] = nn.build_mlp(dims, "relu", "identity", rng, dtype=dtype)
    return DecoderHeads(**nets)


def map_driving_code(mapper: nn.MlpNetwork, expr: np.ndarray):
    """Compress an expression vector to the K-dim driving code."""
    code, _ = map_driving_code_cached(mapper, expr)
    return code


def map_driving_code_cached(mapper: nn.MlpNetwork, expr: np.ndarray):
    expr = np.asarray(expr)
    if expr.ndim != 1 or len(expr) != mapper.in_dim:
        raise ValueError(
            f"expression dimension {expr.shape} does not match mapper input "
            f"({mapper.in_dim})"
        )
    out, cache = nn.forward(mapper, expr[None, :].astype(mapper.layers[0].weights.dtype))
    return out[0], cache


@dataclass
class LatentMap:
    data: np.ndarray  # (S, S, D_PE + D_f + K + 1)
    mask: np.ndarray  # (S, S) bool
    d_pe: int
    d_f: int
    k: int

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def assemble_latent(feat: FeatureMap, penc: np.ndarray, code: np.ndarray,
                    l: float, mask: np.ndarray) -> LatentMap:
    """Concatenate [penc | features | code | lod] per texel; masked texels zeroed."""
    s = feat.resolution
    if penc.shape[:2] != (s, s):
        raise ValueError(
            f"feature map ({s}x{s}) and encoded map {penc.shape[:2]} disagree")
    if mask.shape != (s, s):
        raise ValueError("mask resolution mismatch")
    k = len(code)
    dtype = feat.data.dtype
    n_ch = penc.shape[2] + feat.channels + k + 1
    data = np.empty((s, s, n_ch), dtype=dtype)
    data[:, :, :penc.shape[2]] = penc
    data[:, :, penc.shape[2]:penc.shape[2] + feat.channels] = feat.data
    data[:, :, penc.shape[2] + feat.channels:-1] = code
    data[:, :, -1] = l
    data[~mask] = 0.0
    return LatentMap(data=data, mask=mask, d_pe=penc.shape[2],
                     d_f=feat.channels, k=k)


@dataclass
class DecodeCache:
    rows: np.ndarray
    head_caches: dict
    tanh_offset: np.ndarray
    scales: np.ndarray
    q_unit: np.ndarray
    q_norm: np.ndarray
    alpha: np.ndarray
    offset_scale: float
    scale_base: float


def decode(latent: LatentMap, pmap: UVPositionMap, heads: DecoderHeads,
           offset_scale: float, scale_base: float, want_cache: bool = False):
    """Decode covered texels into a renderable GaussianSet.

    Rows follow numpy boolean-mask order over (i, j), so Gaussian k maps back
    to the k-th covered texel deterministically.
    """
    if latent.mask.shape != pmap.mask.shape or not np.array_equal(latent.mask, pmap.mask):
        raise ValueError("latent map and position map disagree on coverage")
    rows = latent.data[latent.mask]
    for name, net in heads.as_dict().items():
        if net.in_dim != latent.channels:
            raise ValueError(
                f"head '{name}' expects {net.in_dim} channels, latent has "
                f"{latent.channels}")

    raws = {}
    caches = {}
    for name, net in heads.as_dict().items():
        raws[name], caches[name] = nn.forward(net, rows)

    t = np.tanh(raws["offset"])
    delta_mu = offset_scale * t
    mu = pmap.positions[pmap.mask].astype(rows.dtype) + delta_mu
    scales = scale_base * np.exp(raws["scale"])
    u = raws["rotation"].copy()
    u[:, 0] += 1.0
    q_norm = np.linalg.norm(u, axis=1, keepdims=True)
    q = u / q_norm
    alpha = 1.0 / (1.0 + np.exp(-raws["opacity"][:, 0]))
    gset = GaussianSet(mu=mu, scale=scales, quat=q, alpha=alpha,
                       sh=raws["color"])
    if not want_cache:
        return gset
    cache = DecodeCache(rows=rows, head_caches=caches, tanh_offset=t,
                        scales=scales, q_unit=q, q_norm=q_norm, alpha=alpha,
                        offset_scale=offset_scale, scale_base=scale_base)
    return gset, cache


def decode_backward(heads: DecoderHeads, cache: DecodeCache,
                    attr_grads: AttributeGrads):
    """Gradients of the decode transforms and all five heads.

    attr_grads holds d loss / d attribute for each produced Gaussian (render
    gradients plus any attribute regularizers, already summed). Returns
    (head_param_grads, d_latent_rows) where head_param_grads maps head name to
    the flat dW/db list of that head.
    """
    t = cache.tanh_offset
    d_raw = {
        "offset": attr_grads.mu * cache.offset_scale * (1.0 - t * t),
        "scale": attr_grads.scale * cache.scales,
        "color": attr_grads.sh,
    }
    radial = np.sum(cache.q_unit * attr_grads.quat, axis=1, keepdims=True)
    d_raw["rotation"] = (attr_grads.quat - cache.q_unit * radial) / cache.q_norm
    a = cache.alpha
    d_raw["opacity"] = (attr_grads.alpha * a * (1.0 - a))[:, None]

    head_param_grads = {}
    d_rows = np.zeros_like(cache.rows)
    for name, net in heads.as_dict().items():
        pgrads, dx = nn.backward(net, cache.head_caches[name], d_raw[name])
        head_param_grads[name] = pgrads
        d_rows += dx
    return head_param_grads, d_rows


def split_latent_rows_grad(d_rows: np.ndarray, latent: LatentMap):
    """Split per-row latent gradients into (d_feat_map, d_code).

    The positional-encoding and lod channels never receive trainable
    gradients (geometry is fixed, lod is an input), so they are dropped. The
    feature gradient is scattered back onto the full (S, S, D_f) grid.
    """
    s = latent.mask.shape[0]
    d_feat = np.zeros((s, s, latent.d_f), dtype=d_rows.dtype)
    d_feat[latent.mask] = d_rows[:, latent.d_pe:latent.d_pe + latent.d_f]
    d_code = d_rows[:, latent.d_pe + latent.d_f:-1].sum(axis=0)
    return d_feat, d_code
