import numpy as np
import pytest

from splatavatar.gradients import (MissingForwardRecord, ParamGradients,
                                   RenderGrad, backward, check_gradients,
                                   grad_vector, param_vector,
                                   quat_matrix_backward, rasterize_backward,
                                   set_param_vector)
from splatavatar.geometry import quat_to_matrix
from splatavatar.losses import LossWeights, TrainingView
from splatavatar.rasterizer import render
from splatavatar.skinning import repose
from tests.conftest import frontal_camera, make_cube_mesh, random_scene


def pixel_loss_and_grads(g, mesh, cam):
    """loss = sum of squared pixel values over every channel."""
    rp = repose(g, mesh)
    out, ctx = render(g, rp, cam)
    value = (out.color ** 2).sum() + (out.alpha ** 2).sum() \
        + (out.identity ** 2).sum()
    grad = RenderGrad(color=2 * out.color, alpha=2 * out.alpha,
                      identity=2 * out.identity)
    return value, backward(g, rp, ctx, grad)


def test_full_chain_matches_fd():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 8, seed=0)
    cam = frontal_camera(24, 24)
    _, grads = pixel_loss_and_grads(g, mesh, cam)
    base = param_vector(g)
    analytic = grad_vector(g, grads)
    rng = np.random.default_rng(1)
    h = 1e-5
    checked = 0
    for c in rng.choice(base.size, 60, replace=False):
        vec = base.copy()
        vec[c] += h
        set_param_vector(g, vec)
        fp = pixel_loss_and_grads(g, mesh, cam)[0]
        vec[c] -= 2 * h
        set_param_vector(g, vec)
        fm = pixel_loss_and_grads(g, mesh, cam)[0]
        fd = (fp - fm) / (2 * h)
        rel = abs(fd - analytic[c]) / max(abs(fd), abs(analytic[c]), 1e-8)
        assert rel < 1e-4, f"coord {c}: analytic {analytic[c]}, fd {fd}"
        checked += 1
    set_param_vector(g, base)
    assert checked == 60


def test_quat_matrix_backward_matches_fd():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(6, 4))
    d_r = rng.normal(size=(6, 3, 3))
    analytic = quat_matrix_backward(q, d_r)
    h = 1e-7
    for i in range(6):
        for c in range(4):
            qp, qm = q.copy(), q.copy()
            qp[i, c] += h
            qm[i, c] -= h
            fd = ((quat_to_matrix(qp[i]) - quat_to_matrix(qm[i])) / (2 * h)
                  * d_r[i]).sum()
            assert abs(fd - analytic[i, c]) < 1e-6


def test_backward_requires_context():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 3, seed=3)
    with pytest.raises(MissingForwardRecord):
        backward(g, repose(g, mesh), None, RenderGrad())
    with pytest.raises(MissingForwardRecord):
        rasterize_backward(None, RenderGrad())


def test_frozen_rows_get_zero_grads():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 10, seed=4)
    g.frozen[:5] = True
    _, grads = pixel_loss_and_grads(g, mesh, frontal_camera())
    assert np.all(grads.d_offsets[:5] == 0.0)
    assert np.all(grads.d_sh[:5] == 0.0)
    assert np.any(grads.d_sh[5:] != 0.0)


def test_respect_frozen_false_keeps_grads():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 6, seed=5)
    g.frozen[:] = True
    rp = repose(g, mesh)
    out, ctx = render(g, rp, frontal_camera())
    grads = backward(g, rp, ctx, RenderGrad(color=np.ones_like(out.color)),
                     respect_frozen=False)
    assert np.any(grads.d_sh != 0.0)


def test_param_vector_round_trip():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 7, seed=6)
    g.frozen[2] = True
    vec = param_vector(g)
    h = g.copy()
    set_param_vector(h, vec + 1.0)
    assert np.all(h.offsets[2] == g.offsets[2])      # frozen row untouched
    assert np.all(h.offsets[0] == g.offsets[0] + 1.0)
    set_param_vector(h, vec)
    assert h.equals(g)


def test_param_gradients_assert_finite():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 3, seed=7)
    grads = ParamGradients.zeros_like(g)
    grads.d_offsets[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        grads.assert_finite()


# ---------------------------------------------------------------------------
# the named-loss checker used by the CLI and acceptance suite
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("loss_id", ["l1", "id3d", "sdf"])
def test_check_gradients_small(loss_id, cylinder_fixture):
    mesh, scene, cams = cylinder_fixture
    from splatavatar.synthetic import make_views
    views = make_views(scene, mesh, cams[:1])
    small = scene.select(
        (scene.layer == 0) | (np.arange(len(scene)) % 4 == 0))
    # de-degenerate the encodings: with per-band one-hots the KL term is
    # exactly zero and finite differences only measure rounding noise
    rng = np.random.default_rng(9)
    small.identity += rng.normal(0, 0.3, small.identity.shape)
    weights = LossWeights(tau=1.5)
    report = check_gradients(small, mesh, views, weights, loss_id,
                             n_coords=40, seed=0)
    assert report["max_rel_err"] < 1e-4, report
