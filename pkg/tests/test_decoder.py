import numpy as np
import pytest

from alod import nn
from alod.decoder import (assemble_latent, build_heads, decode,
                          decode_backward, map_driving_code,
                          map_driving_code_cached, split_latent_rows_grad)
from alod.geometry import UVPositionMap, build_desk_mesh, deform, \
    positional_encode, rasterize_uv, texel_spacing
from alod.splat import AttributeGrads
from alod.uv_field import FeatureMap
from fd_utils import check_grad


def make_pmap(rng, s=6, covered=None):
    mask = np.ones((s, s), dtype=bool) if covered is None else covered
    positions = np.zeros((s, s, 3))
    positions[mask] = rng.normal(scale=0.4, size=(int(mask.sum()), 3))
    return UVPositionMap(positions=positions, mask=mask)


def make_latent(rng, pmap, d_pe=9, d_f=4, k=5, l=0.3, dtype=np.float64):
    s = pmap.resolution
    feat = FeatureMap(rng.normal(size=(s, s, d_f)).astype(dtype))
    penc = rng.normal(size=(s, s, d_pe)).astype(dtype)
    penc[~pmap.mask] = 0.0
    code = rng.normal(size=k).astype(dtype)
    return assemble_latent(feat, penc, code, l, pmap.mask)


# ---------------------------------------------------------------------------
# driving code
# ---------------------------------------------------------------------------

def test_zero_mapper_gives_zero_code(rng):
    mapper = nn.MlpNetwork([nn.DenseLayer(np.zeros((4, 7)), np.zeros(4), "identity")])
    assert not map_driving_code(mapper, rng.normal(size=7)).any()


def test_driving_code_default_dimension(rng):
    mapper = nn.build_mlp([109, 64, 20], "tanh", "identity", rng, dtype=np.float64)
    code = map_driving_code(mapper, rng.normal(size=109))
    assert code.shape == (20,)


def test_distinct_expressions_distinct_codes(rng):
    mapper = nn.build_mlp([10, 8, 4], "tanh", "identity", rng, dtype=np.float64)
    a = map_driving_code(mapper, rng.normal(size=10))
    b = map_driving_code(mapper, rng.normal(size=10))
    assert not np.allclose(a, b)


def test_driving_code_rejects_mismatch(rng):
    mapper = nn.build_mlp([10, 8, 4], "tanh", "identity", rng)
    with pytest.raises(ValueError):
        map_driving_code(mapper, rng.normal(size=9))


# ---------------------------------------------------------------------------
# latent assembly
# ---------------------------------------------------------------------------

def test_latent_channel_count_reference_combo(rng):
    # 75 + 64 + 20 + 1 = 160 channels
    pmap = make_pmap(rng, s=4)
    latent = make_latent(rng, pmap, d_pe=75, d_f=64, k=20)
    assert latent.channels == 160


def test_latent_lod_channel_constant(rng):
    pmap = make_pmap(rng, s=5)
    latent = make_latent(rng, pmap, l=0.42)
    values = latent.data[pmap.mask][:, -1]
    assert np.allclose(values, 0.42)


def test_latent_masked_rows_zero(rng):
    covered = np.zeros((6, 6), dtype=bool)
    covered[1:4, 2:5] = True
    pmap = make_pmap(rng, 6, covered)
    latent = make_latent(rng, pmap)
    assert not latent.data[~covered].any()


def test_latent_per_texel_locality(rng):
    pmap = make_pmap(rng, s=4)
    s = 4
    feat = FeatureMap(rng.normal(size=(s, s, 3)))
    penc = rng.normal(size=(s, s, 5))
    code = rng.normal(size=2)
    a = assemble_latent(feat, penc, code, 0.5, pmap.mask)
    # swap two texels' inputs -> the corresponding latent rows swap exactly
    f2 = feat.data.copy()
    f2[0, 0], f2[2, 3] = feat.data[2, 3], feat.data[0, 0]
    p2 = penc.copy()
    p2[0, 0], p2[2, 3] = penc[2, 3], penc[0, 0]
    b = assemble_latent(FeatureMap(f2), p2, code, 0.5, pmap.mask)
    assert np.array_equal(a.data[0, 0], b.data[2, 3])
    assert np.array_equal(a.data[2, 3], b.data[0, 0])


def test_latent_resolution_mismatch(rng):
    pmap = make_pmap(rng, s=4)
    feat = FeatureMap(rng.normal(size=(5, 5, 3)))
    with pytest.raises(ValueError):
        assemble_latent(feat, rng.normal(size=(4, 4, 5)), rng.normal(size=2),
                        0.1, pmap.mask)


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def zero_heads(channels, sh_dim=48):
    def zero_net(out):
        return nn.MlpNetwork([nn.DenseLayer(np.zeros((out, channels)),
                                            np.zeros(out), "identity")])
    from alod.decoder import DecoderHeads
    return DecoderHeads(offset=zero_net(3), scale=zero_net(3),
                        rotation=zero_net(4), opacity=zero_net(1),
                        color=zero_net(sh_dim))


def test_decode_zero_heads_neutral_attributes(rng):
    pmap = make_pmap(rng, s=5)
    latent = make_latent(rng, pmap)
    heads = zero_heads(latent.channels)
    gset = decode(latent, pmap, heads, offset_scale=0.2, scale_base=0.07)
    assert np.allclose(gset.mu, pmap.positions[pmap.mask])
    assert np.allclose(gset.scale, 0.07)
    assert np.allclose(gset.quat, [1.0, 0, 0, 0])
    assert np.allclose(gset.alpha, 0.5)
    assert not gset.sh.any()


def test_decode_count_matches_mask(rng):
    covered = np.zeros((8, 8), dtype=bool)
    covered[2:7, 1:5] = True
    pmap = make_pmap(rng, 8, covered)
    latent = make_latent(rng, pmap)
    heads = build_heads(latent.channels, 16, 2, 48, rng, dtype=np.float64)
    gset = decode(latent, pmap, heads, 0.2, 0.05)
    assert len(gset) == int(covered.sum())


def test_decode_empty_mask_gives_empty_set(rng):
    covered = np.zeros((4, 4), dtype=bool)
    pmap = make_pmap(rng, 4, covered)
    latent = make_latent(rng, pmap)
    heads = build_heads(latent.channels, 8, 1, 48, rng, dtype=np.float64)
    gset = decode(latent, pmap, heads, 0.2, 0.05)
    assert len(gset) == 0


def test_decode_random_heads_respect_invariants(rng):
    # GaussianSet's constructor enforces unit quaternions, positive scales and
    # opacities in (0, 1); push a thousand random latents through random heads
    pmap = make_pmap(rng, s=32)
    latent = make_latent(rng, pmap, d_pe=6, d_f=3, k=2)
    heads = build_heads(latent.channels, 12, 2, 48, rng, dtype=np.float64)
    gset = decode(latent, pmap, heads, 0.2, 0.05)
    assert len(gset) == 1024
    assert np.abs(np.linalg.norm(gset.quat, axis=1) - 1).max() < 1e-12


def test_decode_offsets_bounded_by_offset_scale(rng):
    pmap = make_pmap(rng, s=8)
    latent = make_latent(rng, pmap)
    heads = build_heads(latent.channels, 16, 2, 48, rng, dtype=np.float64)
    # crank up the offset head weights; the tanh keeps offsets bounded anyway
    heads.offset.layers[-1].weights[:] *= 50.0
    offset_scale = 0.15
    gset = decode(latent, pmap, heads, offset_scale, 0.05)
    delta = gset.mu - pmap.positions[pmap.mask]
    assert np.abs(delta).max() <= offset_scale + 1e-12


def test_decode_rejects_channel_mismatch(rng):
    pmap = make_pmap(rng, s=4)
    latent = make_latent(rng, pmap)
    heads = build_heads(latent.channels + 1, 8, 1, 48, rng)
    with pytest.raises(ValueError):
        decode(latent, pmap, heads, 0.2, 0.05)


def test_decode_backward_matches_finite_differences(rng):
    pmap = make_pmap(rng, s=4)
    latent = make_latent(rng, pmap, d_pe=5, d_f=3, k=2)
    heads = build_heads(latent.channels, 6, 1, 12, rng, dtype=np.float64)
    adj = None

    def forward():
        gset, cache = decode(latent, pmap, heads, 0.2, 0.05, want_cache=True)
        return gset, cache

    gset, cache = forward()
    adjoints = AttributeGrads(
        mu=rng.normal(size=gset.mu.shape), scale=rng.normal(size=gset.scale.shape),
        quat=rng.normal(size=gset.quat.shape), alpha=rng.normal(size=gset.alpha.shape),
        sh=rng.normal(size=gset.sh.shape))

    def scalar():
        g, _ = decode(latent, pmap, heads, 0.2, 0.05, want_cache=True)
        return float(np.sum(g.mu * adjoints.mu) + np.sum(g.scale * adjoints.scale)
                     + np.sum(g.quat * adjoints.quat)
                     + np.sum(g.alpha * adjoints.alpha)
                     + np.sum(g.sh * adjoints.sh))

    head_grads, d_rows = decode_backward(heads, cache, adjoints)
    params, analytic = [], []
    for name, net in heads.as_dict().items():
        params.extend(net.parameters())
        analytic.extend(head_grads[name])
    check_grad(scalar, params, analytic, rng, n_samples=6, h=1e-6, rtol=1e-6)

    # input gradient: perturb latent rows through the data array
    d_full = np.zeros_like(latent.data)
    d_full[latent.mask] = d_rows
    check_grad(scalar, [latent.data], [d_full], rng, n_samples=12, h=1e-6,
               rtol=1e-6)


def test_split_latent_rows_grad(rng):
    pmap = make_pmap(rng, s=4)
    latent = make_latent(rng, pmap, d_pe=5, d_f=3, k=2)
    n = int(pmap.mask.sum())
    d_rows = rng.normal(size=(n, latent.channels))
    d_feat, d_code = split_latent_rows_grad(d_rows, latent)
    assert d_feat.shape == (4, 4, 3)
    assert np.allclose(d_feat[latent.mask], d_rows[:, 5:8])
    assert np.allclose(d_code, d_rows[:, 8:10].sum(axis=0))
