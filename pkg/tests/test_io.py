import numpy as np
import pytest
from PIL import Image

from splatavatar.io import (LabelOutOfRange, MalformedHeader,
                            MeshHashMismatch, UnsupportedFormat,
                            VersionMismatch, load_camera, load_image,
                            load_mask, load_mesh, load_pose_sequence,
                            load_scene, save_camera, save_image, save_mask,
                            save_mesh, save_pose_sequence, save_scene)
from splatavatar.skinning import Pose
from splatavatar.synthetic import bend_pose, cylinder_mesh, look_at_camera
from tests.conftest import make_cube_mesh, random_scene


@pytest.fixture
def scene_and_mesh():
    mesh = make_cube_mesh()
    return random_scene(mesh, 40, seed=0, sh_degree=1), mesh


# ---------------------------------------------------------------------------
# splat files
# ---------------------------------------------------------------------------

def test_scene_round_trip_is_stable(scene_and_mesh, tmp_path):
    """Values are stored as float32; a second round trip is bitwise exact."""
    g, mesh = scene_and_mesh
    p1, p2 = str(tmp_path / "a.ply"), str(tmp_path / "b.ply")
    save_scene(g, p1, mesh)
    once = load_scene(p1, mesh)
    save_scene(once, p2, mesh)
    twice = load_scene(p2, mesh)
    assert twice.equals(once)
    # the f32 quantization itself is small
    assert np.abs(once.offsets - g.offsets).max() < 1e-6
    assert np.array_equal(once.layer, g.layer)
    assert np.array_equal(once.frozen, g.frozen)


def test_scene_mesh_hash_checked(scene_and_mesh, tmp_path):
    g, mesh = scene_and_mesh
    path = str(tmp_path / "a.ply")
    save_scene(g, path, mesh)
    load_scene(path, mesh)  # matching hash is fine
    load_scene(path)        # skipping the check is allowed
    with pytest.raises(MeshHashMismatch):
        load_scene(path, cylinder_mesh())


def test_scene_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"not a ply file at all\n")
    with pytest.raises(MalformedHeader):
        load_scene(str(path))


def test_scene_rejects_truncation(scene_and_mesh, tmp_path):
    g, mesh = scene_and_mesh
    path = str(tmp_path / "a.ply")
    save_scene(g, path, mesh)
    data = open(path, "rb").read()
    trunc = tmp_path / "t.ply"
    trunc.write_bytes(data[:-17])
    with pytest.raises(MalformedHeader):
        load_scene(str(trunc))


def test_scene_rejects_wrong_version(scene_and_mesh, tmp_path):
    g, mesh = scene_and_mesh
    path = str(tmp_path / "a.ply")
    save_scene(g, path, mesh)
    data = open(path, "rb").read().replace(b"splat_version 1",
                                           b"splat_version 9")
    bad = tmp_path / "v.ply"
    bad.write_bytes(data)
    with pytest.raises(VersionMismatch):
        load_scene(str(bad))


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def test_mesh_round_trip(tmp_path):
    mesh = cylinder_mesh(n_seg=8, n_rings=4)
    path = str(tmp_path / "m.json")
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
    assert back.joint_names == mesh.joint_names
    assert np.array_equal(back.joint_parents, mesh.joint_parents)
    assert np.allclose(back.skin_weights, mesh.skin_weights, atol=1e-12)
    for k in mesh.face_regions:
        assert np.array_equal(back.face_regions[k], mesh.face_regions[k])
    assert back.content_hash() == mesh.content_hash()


def test_mesh_rejects_bad_weights(tmp_path):
    import json
    mesh = make_cube_mesh()
    path = str(tmp_path / "m.json")
    save_mesh(mesh, path)
    doc = json.load(open(path))
    doc["skin_weights"][0][0][1] = 0.5  # row no longer sums to 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_mesh(str(bad))


# ---------------------------------------------------------------------------
# poses and cameras
# ---------------------------------------------------------------------------

def test_pose_sequence_round_trip(tmp_path):
    mesh = cylinder_mesh(n_seg=8, n_rings=4)
    poses = [Pose.identity(2), bend_pose(mesh, 0.4), bend_pose(mesh, -0.3)]
    path = str(tmp_path / "p.json")
    save_pose_sequence(poses, mesh, path, times=[0.0, 0.5, 1.0])
    back, times = load_pose_sequence(path, mesh)
    assert np.allclose(times, [0.0, 0.5, 1.0])
    for a, b in zip(back, poses):
        assert np.allclose(a.joint_transforms, b.joint_transforms, atol=1e-12)
        assert np.allclose(a.root, b.root, atol=1e-12)


def test_pose_sequence_joint_names_must_match(tmp_path):
    mesh = cylinder_mesh(n_seg=8, n_rings=4)
    path = str(tmp_path / "p.json")
    save_pose_sequence([Pose.identity(2)], mesh, path)
    with pytest.raises(ValueError):
        load_pose_sequence(path, make_cube_mesh())


def test_camera_round_trip(tmp_path):
    cam = look_at_camera(np.array([2.0, 1.0, 3.0]), np.zeros(3),
                         width=100, height=80)
    path = str(tmp_path / "c.cam")
    save_camera(cam, path)
    back = load_camera(path)
    assert np.array_equal(back.world_to_cam, cam.world_to_cam)
    assert (back.fx, back.fy, back.cx, back.cy) == \
        (cam.fx, cam.fy, cam.cx, cam.cy)
    assert (back.width, back.height, back.near) == \
        (cam.width, cam.height, cam.near)


# ---------------------------------------------------------------------------
# images and masks
# ---------------------------------------------------------------------------

def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.uniform(size=(12, 17, 3)) * 255) / 255
    path = str(tmp_path / "i.png")
    save_image(img, path)
    assert np.allclose(load_image(path), img, atol=1e-12)


def test_image_rejects_16bit(tmp_path):
    path = str(tmp_path / "deep.png")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(path)
    with pytest.raises(UnsupportedFormat):
        load_image(path)


def test_mask_round_trip(tmp_path):
    labels = np.random.default_rng(1).integers(0, 15, (9, 13)).astype(np.uint8)
    path = str(tmp_path / "m.png")
    save_mask(labels, path)
    assert np.array_equal(load_mask(path), labels)


def test_mask_rejects_rgb(tmp_path):
    path = str(tmp_path / "rgb.png")
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(path)
    with pytest.raises(UnsupportedFormat):
        load_mask(path)


def test_mask_rejects_out_of_range_labels(tmp_path):
    path = str(tmp_path / "hot.png")
    Image.fromarray(np.full((4, 4), 60, dtype=np.uint8), mode="L").save(path)
    with pytest.raises(LabelOutOfRange):
        load_mask(path)
