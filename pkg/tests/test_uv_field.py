import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alod.uv_field import (FeatureField, FeatureMap, bicubic_resize,
                           blend_weights, init_field, resample,
                           resample_backward, resolution_for_lod)
from fd_utils import check_grad


# ---------------------------------------------------------------------------
# resolution formula
# ---------------------------------------------------------------------------

def test_resolution_endpoints_reference_settings():
    assert resolution_for_lod(0.0, 256, 64) == 256
    assert resolution_for_lod(1.0, 256, 64) == 64


def test_resolution_midpoint():
    # 256 - 0.5 * 192 = 160 exactly
    assert resolution_for_lod(0.5, 256, 64) == 160


def test_resolution_rounds_ties_toward_s_max():
    # s = 65 - 0.5 * 1 = 64.5 -> ties go up
    assert resolution_for_lod(0.5, 65, 64) == 65


def test_resolution_monotone_grid():
    grid = np.linspace(0.0, 1.0, 1001)
    values = [resolution_for_lod(float(l), 256, 64) for l in grid]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert min(values) == 64 and max(values) == 256


def test_resolution_rejects_bad_inputs():
    with pytest.raises(ValueError):
        resolution_for_lod(-0.01, 256, 64)
    with pytest.raises(ValueError):
        resolution_for_lod(1.01, 256, 64)
    with pytest.raises(ValueError):
        resolution_for_lod(0.5, 64, 256)


@given(l=st.floats(0.0, 1.0), s_min=st.integers(1, 128), span=st.integers(0, 512))
def test_resolution_stays_in_range(l, s_min, span):
    s = resolution_for_lod(l, s_min + span, s_min)
    assert s_min <= s <= s_min + span


# ---------------------------------------------------------------------------
# blend weights
# ---------------------------------------------------------------------------

def scalar_blend_reference(resolutions, target_s, tau):
    # independent straight-line evaluation with python floats
    logits = [math.exp(-abs(math.log(s) - math.log(target_s)) / tau)
              for s in resolutions]
    total = sum(logits)
    return [x / total for x in logits]


def test_blend_weights_reference_point():
    got = blend_weights([64, 128, 256], 256, 0.35)
    expect = scalar_blend_reference([64, 128, 256], 256, 0.35)
    assert np.allclose(got, expect, atol=1e-14)
    assert np.allclose(got, [0.0165, 0.1193, 0.8642], atol=5e-4)


def test_blend_weights_tie_symmetry():
    got = blend_weights([128, 128], 128, 0.35)
    assert np.allclose(got, [0.5, 0.5], atol=1e-15)


def test_blend_weights_rejects_bad_inputs():
    with pytest.raises(ValueError):
        blend_weights([64, 128], 128, 0.0)
    with pytest.raises(ValueError):
        blend_weights([64, 128], 128, -1.0)
    with pytest.raises(ValueError):
        blend_weights([0, 128], 128, 0.35)
    with pytest.raises(ValueError):
        blend_weights([64, 128], 0, 0.35)


@settings(max_examples=200)
@given(
    resolutions=st.lists(st.integers(1, 4096), min_size=1, max_size=8),
    target_s=st.integers(1, 4096),
    tau=st.floats(0.01, 10.0),
)
def test_blend_weights_properties(resolutions, target_s, tau):
    w = blend_weights(resolutions, target_s, tau)
    assert np.all(w > 0)
    assert abs(w.sum() - 1.0) < 1e-12
    dist = np.abs(np.log(resolutions) - math.log(target_s))
    assert np.argmax(w) == np.argmin(dist)


# ---------------------------------------------------------------------------
# bicubic resize
# ---------------------------------------------------------------------------

def catmull_rom_kernel(x):
    x = abs(x)
    if x <= 1.0:
        return 1.5 * x**3 - 2.5 * x**2 + 1.0
    if x < 2.0:
        return -0.5 * x**3 + 2.5 * x**2 - 4.0 * x + 2.0
    return 0.0


def reference_resize_1d(values, s_out):
    s_in = len(values)
    out = np.zeros(s_out)
    for j in range(s_out):
        u = (j + 0.5) * s_in / s_out - 0.5
        base = math.floor(u)
        for tap in range(-1, 3):
            v = base + tap
            w = catmull_rom_kernel(u - v)
            out[j] += w * values[min(max(v, 0), s_in - 1)]
    return out


def test_resize_identity_exact(rng):
    fmap = FeatureMap(rng.normal(size=(7, 7, 3)))
    out = bicubic_resize(fmap, 7)
    assert np.array_equal(out.data, fmap.data)


def test_resize_preserves_constant(rng):
    fmap = FeatureMap(np.full((5, 5, 2), 3.25))
    for s in (3, 5, 9, 16):
        out = bicubic_resize(fmap, s)
        assert np.allclose(out.data, 3.25, atol=1e-12)


def test_resize_matches_scalar_reference(rng):
    # ramp along axis 0 is separable: compare against per-texel kernel sums
    ramp = np.arange(4.0)
    fmap = FeatureMap(np.broadcast_to(ramp[:, None, None], (4, 4, 1)).copy())
    out = bicubic_resize(fmap, 8)
    expect = reference_resize_1d(ramp, 8)
    for j in range(8):
        assert np.allclose(out.data[:, j, 0], expect, atol=1e-10)

    # and a full 2-D check on random data
    data = rng.normal(size=(4, 4, 1))
    out = bicubic_resize(FeatureMap(data), 6)
    for i in range(6):
        for j in range(6):
            cols = np.stack([reference_resize_1d(data[:, v, 0], 6) for v in range(4)],
                            axis=1)
            expect_ij = reference_resize_1d(cols[i], 6)[j]
            assert abs(out.data[i, j, 0] - expect_ij) < 1e-10


def test_resize_linear_in_values(rng):
    a = rng.normal(size=(5, 5, 2))
    b = rng.normal(size=(5, 5, 2))
    lhs = bicubic_resize(FeatureMap(2.5 * a - 1.25 * b), 9).data
    rhs = 2.5 * bicubic_resize(FeatureMap(a), 9).data \
        - 1.25 * bicubic_resize(FeatureMap(b), 9).data
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_resize_rejects_bad_target(rng):
    with pytest.raises(ValueError):
        bicubic_resize(FeatureMap(rng.normal(size=(4, 4, 1))), 0)


# ---------------------------------------------------------------------------
# field construction
# ---------------------------------------------------------------------------

def test_field_validation(rng):
    good = [FeatureMap(rng.normal(size=(4, 4, 2))),
            FeatureMap(rng.normal(size=(8, 8, 2)))]
    FeatureField(good)
    with pytest.raises(ValueError):
        FeatureField(list(reversed(good)))
    with pytest.raises(ValueError):
        FeatureField([good[0], FeatureMap(rng.normal(size=(8, 8, 3)))])
    with pytest.raises(ValueError):
        FeatureField(good, tau=0.0)
    with pytest.raises(ValueError):
        FeatureMap(np.full((4, 4, 1), np.nan))


def test_init_field_ranges():
    field = init_field([8, 16], 4, np.random.default_rng(0))
    assert field.resolutions == [8, 16]
    for level in field.levels:
        assert level.data.dtype == np.float32
        assert np.abs(level.data).max() <= 1e-2
    again = init_field([8, 16], 4, np.random.default_rng(0))
    for a, b in zip(field.levels, again.levels):
        assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# resample
# ---------------------------------------------------------------------------

def make_field(rng, resolutions=(8, 16, 32), channels=3, tau=0.35, dtype=np.float64):
    levels = [FeatureMap(rng.normal(size=(s, s, channels)).astype(dtype))
              for s in resolutions]
    return FeatureField(levels, tau=tau)


def test_resample_constant_field():
    levels = [FeatureMap(np.full((s, s, 2), 0.75)) for s in (8, 16, 32)]
    field = FeatureField(levels)
    for l in (0.0, 0.31, 0.77, 1.0):
        out = resample(field, l)
        assert np.allclose(out.data, 0.75, atol=1e-12)


def test_resample_near_one_hot_top_level(rng):
    field = make_field(rng, tau=0.01)
    out = resample(field, 0.0)
    assert out.resolution == 32
    assert np.abs(out.data - field.levels[-1].data).max() < 1e-3


def test_resample_matches_straight_line_reference(rng):
    field = make_field(rng, resolutions=(8, 32), tau=0.35)
    l = 0.5
    s = resolution_for_lod(l, 32, 8)
    w = np.asarray(
        [math.exp(-abs(math.log(si) - math.log(s)) / 0.35) for si in (8, 32)])
    w = w / w.sum()
    expect = (w[0] * bicubic_resize(field.levels[0], s).data
              + w[1] * bicubic_resize(field.levels[1], s).data)
    got = resample(field, l)
    assert got.resolution == s
    assert np.allclose(got.data, expect, atol=1e-12)


def test_resample_linear_in_fields(rng):
    res = (8, 16)
    a = make_field(rng, resolutions=res)
    b = make_field(rng, resolutions=res)
    mixed = FeatureField(
        [FeatureMap(1.5 * x.data + 0.25 * y.data)
         for x, y in zip(a.levels, b.levels)], tau=a.tau)
    for l in (0.0, 0.4, 1.0):
        lhs = resample(mixed, l).data
        rhs = 1.5 * resample(a, l).data + 0.25 * resample(b, l).data
        assert np.allclose(lhs, rhs, atol=1e-10)


def test_resample_continuity_at_rounding_step(rng):
    # smooth field: change across one rounding step stays comparable to the
    # change a plain bicubic resize sees across one resolution step
    grid = np.linspace(0, 1, 32)
    smooth = np.sin(3 * grid)[:, None, None] * np.cos(2 * grid)[None, :, None]
    levels = [FeatureMap(np.asarray(
        bicubic_resize(FeatureMap(smooth), s).data)) for s in (8, 16, 32)]
    field = FeatureField(levels, tau=0.35)
    s_max, s_min = 32, 8
    # straddle the l where the resolution rounds from 20 down to 19
    l_minus = (s_max - 19.5) / (s_max - s_min) - 1e-6
    l_plus = (s_max - 19.5) / (s_max - s_min) + 1e-6
    a = resample(field, l_minus)
    b = resample(field, l_plus)
    assert a.resolution == 20 and b.resolution == 19
    blended_change = np.abs(bicubic_resize(b, 20).data - a.data).max()
    ref = bicubic_resize(field.levels[-1], 20).data
    ref_step = np.abs(
        bicubic_resize(bicubic_resize(field.levels[-1], 19), 20).data - ref).max()
    assert blended_change < 10.0 * ref_step


# ---------------------------------------------------------------------------
# resample backward
# ---------------------------------------------------------------------------

def test_backward_zero_grad(rng):
    field = make_field(rng)
    s = resolution_for_lod(0.3, 32, 8)
    grads = resample_backward(field, 0.3, np.zeros((s, s, 3)))
    for g, level in zip(grads, field.levels):
        assert g.shape == level.data.shape
        assert not g.any()


def test_backward_single_level_degenerate(rng):
    # one-level field (s_min == s_max): weight is exactly 1, the gradient is
    # the pure resize adjoint
    field = FeatureField([FeatureMap(rng.normal(size=(8, 8, 2)))])
    grad_out = rng.normal(size=(8, 8, 2))
    (g,) = resample_backward(field, 0.5, grad_out)
    assert np.array_equal(g, grad_out)


def test_backward_shape_mismatch(rng):
    field = make_field(rng)
    with pytest.raises(ValueError):
        resample_backward(field, 0.0, np.zeros((5, 5, 3)))


def test_backward_matches_finite_differences(rng):
    field = make_field(rng, resolutions=(8, 16, 32), channels=2)
    for l in (0.0, 0.37, 1.0):
        s = resolution_for_lod(l, 32, 8)
        adjoint = rng.normal(size=(s, s, 2))

        def scalar():
            return float(np.sum(resample(field, l).data * adjoint))

        grads = resample_backward(field, l, adjoint)
        check_grad(scalar, [lev.data for lev in field.levels], grads, rng,
                   n_samples=12, h=0.05, rtol=1e-5)


def test_backward_adjoint_identity(rng):
    # <resample(x), y> == <x, resample_backward(y)> by linearity
    field = make_field(rng, resolutions=(8, 16), channels=1)
    l = 0.42
    s = resolution_for_lod(l, 16, 8)
    y = rng.normal(size=(s, s, 1))
    lhs = float(np.sum(resample(field, l).data * y))
    grads = resample_backward(field, l, y)
    rhs = sum(float(np.sum(g * lev.data))
              for g, lev in zip(grads, field.levels))
    assert abs(lhs - rhs) < 1e-10
