import numpy as np
import pytest

from splatavatar.deform import (DeformField, DeformTrainConfig, FrameSample,
                                INPUT_DIM, TooFewFrames, animate, apply_deform,
                                encode_position, encode_time, encode_time_dt,
                                load_deform, residual_quaternion, save_deform,
                                train_deform)
from splatavatar.rasterizer import render
from splatavatar.scene import LAYER_BODY
from splatavatar.skinning import Pose, repose
from splatavatar.synthetic import (bend_pose, oscillation_frames)
from tests.conftest import frontal_camera, make_cube_mesh, random_scene


def test_encoding_dimensions():
    pos = np.zeros((5, 3))
    assert encode_position(pos).shape == (5, 36)
    assert encode_time(0.3).shape == (8,)
    assert INPUT_DIM == 44


def test_zero_init_heads_are_identity():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 12, seed=0)
    rp = repose(g, mesh)
    field = DeformField.create(seed=0)
    for t in [0.0, 0.37, 1.0]:
        out = apply_deform(field, g, rp, t)
        assert np.array_equal(out.positions, rp.positions)
        assert np.array_equal(out.rotations, rp.rotations)
        assert np.array_equal(out.scales, rp.scales)


def test_constant_position_head_shifts_assets_only():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 10, seed=1)
    g.layer[:5] = LAYER_BODY
    rp = repose(g, mesh)
    field = DeformField.create(seed=0)
    field.params["b_pos"][:] = [0.1, -0.2, 0.3]
    out = apply_deform(field, g, rp, 0.5)
    assert np.allclose(out.positions[5:] - rp.positions[5:], [0.1, -0.2, 0.3])
    assert np.array_equal(out.positions[:5], rp.positions[:5])
    assert np.array_equal(out.rotations, rp.rotations)


def test_residual_quaternion_identity_and_norm():
    assert np.array_equal(residual_quaternion(np.zeros((3, 4))),
                          np.tile([1.0, 0, 0, 0], (3, 1)))
    rng = np.random.default_rng(2)
    q = residual_quaternion(rng.normal(0, 0.5, (20, 4)))
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)


def test_apply_deform_rejects_bad_time():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 3, seed=3)
    field = DeformField.create(seed=0)
    with pytest.raises(ValueError):
        apply_deform(field, g, repose(g, mesh), 1.5)


def test_dt_jacobian_matches_fd():
    field = DeformField.create(seed=4)
    for k in field.param_names():
        field.params[k] += np.random.default_rng(5).normal(
            0, 0.05, field.params[k].shape)
    pos = np.random.default_rng(6).normal(0, 0.5, (7, 3))
    t = 0.42
    jac = field.dt_jacobian(pos, t)
    h = 1e-6
    fp = field.forward(pos, t + h)[0]
    fm = field.forward(pos, t - h)[0]
    assert np.abs((fp - fm) / (2 * h) - jac).max() < 1e-4


def test_backward_matches_fd():
    field = DeformField.create(seed=7)
    rng = np.random.default_rng(8)
    for k in field.param_names():
        field.params[k] += rng.normal(0, 0.05, field.params[k].shape)
    pos = rng.normal(0, 0.5, (5, 3))
    g_pos = rng.normal(size=(5, 3))
    g_rot = rng.normal(size=(5, 4))
    g_ls = rng.normal(size=(5, 3))

    def loss():
        dpos, drot, dls = field.forward(pos, 0.3)
        return (dpos * g_pos).sum() + (drot * g_rot).sum() + (dls * g_ls).sum()

    _, cache = field.forward(pos, 0.3, with_cache=True)
    grads = field.backward(cache, g_pos, g_rot, g_ls)
    h = 1e-6
    for k in ["w1", "w3", "w_pos", "b_rot", "w_ls"]:
        p = field.params[k]
        idx = tuple(rng.integers(s) for s in p.shape)
        p[idx] += h
        fp = loss()
        p[idx] -= 2 * h
        fm = loss()
        p[idx] += h
        fd = (fp - fm) / (2 * h)
        assert abs(fd - grads[k][idx]) < 1e-5, k


# ---------------------------------------------------------------------------
# training and animation
# ---------------------------------------------------------------------------

def test_train_deform_requires_two_frames():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 4, seed=9)
    cam = frontal_camera()
    frame = FrameSample(t=0.0, pose=Pose.identity(1), cam=cam,
                        image=np.zeros((32, 32, 3)))
    with pytest.raises(TooFewFrames):
        train_deform(g, mesh, [frame])


def test_train_deform_static_sequence_stays_near_zero():
    """Frames that exactly match the undeformed render leave the zero-init
    field essentially untouched."""
    mesh = make_cube_mesh()
    g = random_scene(mesh, 20, seed=10)
    cam = frontal_camera()
    static, _ = render(g, repose(g, mesh), cam)
    frames = [FrameSample(t=t, pose=Pose.identity(1), cam=cam,
                          image=static.color) for t in (0.0, 0.5, 1.0)]
    field, log = train_deform(g, mesh, frames,
                              cfg=DeformTrainConfig(iters=50))
    dpos, _, _ = field.forward(repose(g, mesh).positions, 0.5)
    assert np.abs(dpos).mean() <= 1e-3
    assert log[-1]["ref"] < 1e-10


def test_train_deform_is_seeded():
    mesh = make_cube_mesh()
    g = random_scene(mesh, 10, seed=11)
    cam = frontal_camera()
    static, _ = render(g, repose(g, mesh), cam)
    img = np.clip(static.color + 0.05, 0, 1)
    frames = [FrameSample(t=t, pose=Pose.identity(1), cam=cam, image=img)
              for t in (0.0, 1.0)]
    cfg = DeformTrainConfig(iters=20, seed=3)
    f1, _ = train_deform(g, mesh, frames, cfg=cfg)
    f2, _ = train_deform(g, mesh, frames, cfg=cfg)
    for k in f1.param_names():
        assert np.array_equal(f1.params[k], f2.params[k])


def test_animate_zero_field_matches_static(cylinder_fixture):
    mesh, scene, cams = cylinder_fixture
    poses = [Pose.identity(len(mesh.joint_names))] * 3
    field = DeformField.create(seed=0)
    with_field = animate(scene, mesh, poses, cams[0], field_=field)
    without = animate(scene, mesh, poses, cams[0])
    for a, b in zip(with_field, without):
        assert np.array_equal(a.color, b.color)
    # identical poses give identical frames
    assert np.array_equal(without[0].color, without[2].color)


def test_animate_bent_pose_differs(cylinder_fixture):
    mesh, scene, cams = cylinder_fixture
    rest = Pose.identity(len(mesh.joint_names))
    bent = bend_pose(mesh, 0.6)
    frames = animate(scene, mesh, [rest, bent], cams[0])
    assert not np.array_equal(frames[0].color, frames[1].color)


def test_oscillation_frames_shape(cylinder_fixture):
    mesh, scene, cams = cylinder_fixture
    frames, gt = oscillation_frames(scene, mesh, cams[0], n_frames=4,
                                    amplitude=0.05)
    assert len(frames) == 4 and len(gt) == 4
    assert frames[0].t == 0.0 and frames[-1].t == 1.0
    assert not np.array_equal(frames[0].image, frames[1].image)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    field = DeformField.create(seed=12)
    rng = np.random.default_rng(13)
    for k in field.param_names():
        field.params[k] += rng.normal(0, 0.1, field.params[k].shape)
    path = str(tmp_path / "f.deform")
    save_deform(field, path)
    back = load_deform(path)
    assert back.seed == field.seed
    for k in field.param_names():
        assert np.array_equal(back.params[k], field.params[k])


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.deform"
    path.write_bytes(b"NOTADEFORM\n" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_deform(str(path))


def test_loaded_field_behaves_identically(tmp_path):
    mesh = make_cube_mesh()
    g = random_scene(mesh, 8, seed=14)
    rp = repose(g, mesh)
    field = DeformField.create(seed=15)
    field.params["b_pos"][:] = [0.05, 0.0, -0.05]
    path = str(tmp_path / "f.deform")
    save_deform(field, path)
    a = apply_deform(field, g, rp, 0.5)
    b = apply_deform(load_deform(path), g, rp, 0.5)
    assert np.array_equal(a.positions, b.positions)
