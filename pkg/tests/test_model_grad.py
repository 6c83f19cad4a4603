"""End-to-end gradient checks across the whole differentiable chain."""

import numpy as np
import pytest

from alod.config import TrainConfig
from alod.geometry import look_at_camera
from alod.model import AvatarModel, backward_frame, build_model, forward_frame
from alod.splat import AttributeGrads, RenderSettings
from conftest import make_quad_mesh
from fd_utils import check_grad

CHAIN_SETTINGS = RenderSettings(background=(0.3, 0.5, 0.7), alpha_cutoff=0.0,
                                transmittance_min=0.0, exact_coverage=True)


def tiny_model(rng, s_max=8, s_min=4):
    cfg = TrainConfig(s_max=s_max, s_min=s_min, n_levels=2, d_f=3, n_freq=2,
                      k_driving=4, expr_dim=6, sh_degree=1, mapper_hidden=5,
                      head_hidden=6, head_layers=1, image_size=16,
                      mesh_rows=4, mesh_cols=6, n_blendshapes=2,
                      gt_resolution=6, n_frames=1)
    mesh = make_quad_mesh(margin=0.25, z_fn=lambda x, y: 0.15 * x - 0.1 * y)
    model = build_model(cfg, mesh, rng, dtype=np.float64)
    return model


@pytest.fixture
def chain(rng):
    model = tiny_model(rng)
    expr = rng.normal(scale=0.4, size=6)
    camera = look_at_camera([0.3, 0.4, 2.5], [0.5, 0.5, 0.0], 16, 16)
    return model, expr, camera


def _param_subset(model: AvatarModel):
    params = model.parameters()
    names = ["field.level0", "field.level1", "mapper.l0.w", "mapper.l1.b",
             "heads.offset.l1.w", "heads.scale.l1.w", "heads.rotation.l0.w",
             "heads.opacity.l1.b", "heads.color.l1.w"]
    return {n: params[n] for n in names}


def test_chain_without_render_matches_fd(chain, rng):
    model, expr, camera = chain
    lod = 0.35
    probe = forward_frame(model, expr, camera, lod, settings=CHAIN_SETTINGS)
    adj = AttributeGrads(
        mu=rng.normal(size=probe.gaussians.mu.shape),
        scale=rng.normal(size=probe.gaussians.scale.shape),
        quat=rng.normal(size=probe.gaussians.quat.shape),
        alpha=rng.normal(size=probe.gaussians.alpha.shape),
        sh=rng.normal(size=probe.gaussians.sh.shape))

    def scalar():
        fwd = forward_frame(model, expr, camera, lod, settings=CHAIN_SETTINGS)
        g = fwd.gaussians
        return float(np.sum(g.mu * adj.mu) + np.sum(g.scale * adj.scale)
                     + np.sum(g.quat * adj.quat) + np.sum(g.alpha * adj.alpha)
                     + np.sum(g.sh * adj.sh))

    fwd = forward_frame(model, expr, camera, lod, settings=CHAIN_SETTINGS,
                        want_cache=True)
    grads = backward_frame(model, fwd, np.zeros((16, 16, 3)),
                           extra_attr_grads=adj, train_mapper=True)
    subset = _param_subset(model)
    check_grad(scalar, list(subset.values()), [grads[n] for n in subset], rng,
               n_samples=8, h=1e-5, rtol=1e-5)


@pytest.mark.parametrize("lod", [0.0, 0.6])
def test_full_chain_with_render_matches_fd(chain, rng, lod):
    model, expr, camera = chain
    adjoint = rng.normal(size=(16, 16, 3))

    def scalar():
        fwd = forward_frame(model, expr, camera, lod, settings=CHAIN_SETTINGS)
        return float(np.sum(fwd.image * adjoint))

    fwd = forward_frame(model, expr, camera, lod, settings=CHAIN_SETTINGS,
                        want_cache=True)
    grads = backward_frame(model, fwd, adjoint, train_mapper=True)
    subset = _param_subset(model)
    check_grad(scalar, list(subset.values()), [grads[n] for n in subset], rng,
               n_samples=6, h=1e-5, rtol=1e-4)


def test_gradients_cover_every_parameter(chain, rng):
    model, expr, camera = chain
    fwd = forward_frame(model, expr, camera, 0.2, settings=CHAIN_SETTINGS,
                        want_cache=True)
    grads = backward_frame(model, fwd, rng.normal(size=(16, 16, 3)),
                           train_mapper=True)
    assert set(grads) == set(model.parameters())
    # every feature level keeps a gradient path (blend weights never vanish)
    for i in range(2):
        assert np.abs(grads[f"field.level{i}"]).max() > 0
