import numpy as np
import pytest

from splatavatar.editing import (EmptyGroup, TopologyMismatch, extract_group,
                                 group_mask, recolor_group, remove_group,
                                 transfer_group)
from splatavatar.geometry import _C0
from splatavatar.rasterizer import render
from splatavatar.scene import InvalidCategory, LAYER_BODY, SkinnedMesh
from splatavatar.skinning import repose
from splatavatar.synthetic import PANTS_CATEGORY, TOP_CATEGORY
from tests.conftest import make_cube_mesh, random_scene


def two_group_scene(mesh, seed=0):
    g = random_scene(mesh, 24, seed=seed, category=TOP_CATEGORY)
    g.identity[12:] = 0.0
    g.identity[12:, PANTS_CATEGORY] = 8.0
    return g


def test_group_mask_excludes_body():
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    g.layer[:4] = LAYER_BODY
    mask = group_mask(g, TOP_CATEGORY)
    assert not mask[:4].any()
    assert mask[4:12].all()


def test_group_mask_rejects_bad_category():
    g = two_group_scene(make_cube_mesh())
    for bad in (0, 15, -1):
        with pytest.raises(InvalidCategory):
            group_mask(g, bad)


# ---------------------------------------------------------------------------
# removal
# ---------------------------------------------------------------------------

def test_remove_group_partitions_scene():
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    out = remove_group(g, TOP_CATEGORY)
    assert len(out) == 12
    assert np.all(out.categories() == PANTS_CATEGORY)


def test_remove_matches_opacity_zero(cylinder_fixture):
    """Removing a group renders identically (1e-12) to zeroing its opacity."""
    mesh, scene, cams = cylinder_fixture
    removed = remove_group(scene, TOP_CATEGORY)
    muted = scene.copy()
    muted.opacity_logit[group_mask(scene, TOP_CATEGORY)] = -np.inf
    a, _ = render(removed, repose(removed, mesh), cams[0])
    b, _ = render(muted, repose(muted, mesh), cams[0])
    assert np.abs(a.color - b.color).max() < 1e-12
    assert np.abs(a.alpha - b.alpha).max() < 1e-12


def test_remove_commutes():
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    ab = remove_group(remove_group(g, TOP_CATEGORY), PANTS_CATEGORY)
    ba = remove_group(remove_group(g, PANTS_CATEGORY), TOP_CATEGORY)
    assert ab.equals(ba)


def test_remove_keeps_body(cylinder_fixture):
    mesh, scene, _ = cylinder_fixture
    body_before = scene.select(scene.layer == LAYER_BODY)
    out = remove_group(scene, TOP_CATEGORY)
    assert out.select(out.layer == LAYER_BODY).equals(body_before)


# ---------------------------------------------------------------------------
# recoloring
# ---------------------------------------------------------------------------

def test_recolor_flat_target_hits_color():
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    target = np.array([0.1, 0.9, 0.4])
    out = recolor_group(g, TOP_CATEGORY, target)
    group = group_mask(g, TOP_CATEGORY)
    color = _C0 * out.sh[group, 0, :]
    assert np.abs(color - target).max() < 0.02


def test_recolor_touches_only_group_sh():
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    out = recolor_group(g, TOP_CATEGORY, (0.2, 0.2, 0.9))
    group = group_mask(g, TOP_CATEGORY)
    # every non-SH field is bitwise identical
    for name in ("face_index", "offsets", "rotation", "log_scale",
                 "opacity_logit", "identity", "layer", "frozen"):
        assert np.array_equal(getattr(out, name), getattr(g, name)), name
    assert np.array_equal(out.sh[~group], g.sh[~group])
    assert not np.array_equal(out.sh[group], g.sh[group])


def test_recolor_view_target(cylinder_fixture):
    mesh, scene, cams = cylinder_fixture
    green = np.array([0.1, 0.8, 0.2])
    group = group_mask(scene, TOP_CATEGORY)
    gt = scene.copy()
    gt.sh[group] = 0.0
    gt.sh[group, 0, :] = green / _C0
    targets = [(cam, render(gt, repose(gt, mesh), cam)[0].color)
               for cam in cams[:2]]
    out = recolor_group(scene, TOP_CATEGORY, targets, iters=150, mesh=mesh)
    color = _C0 * out.sh[group, 0, :]
    assert np.abs(color.mean(axis=0) - green).max() < 0.1


def test_recolor_empty_group():
    g = two_group_scene(make_cube_mesh())
    with pytest.raises(EmptyGroup):
        recolor_group(g, 9, (1.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# extraction and transfer
# ---------------------------------------------------------------------------

def test_extract_merge_round_trip():
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    top, m = extract_group(g, TOP_CATEGORY, mesh)
    rest = remove_group(g, TOP_CATEGORY)
    merged = type(g).concatenate([rest, top])
    assert m is mesh
    assert len(merged) == len(g)
    # same multiset of rows: sort both by a stable key and compare bitwise
    key_a = np.lexsort((merged.offsets[:, 0], merged.face_index))
    key_b = np.lexsort((g.offsets[:, 0], g.face_index))
    for name in ("face_index", "offsets", "rotation", "log_scale",
                 "opacity_logit", "sh", "identity", "layer", "frozen"):
        assert np.array_equal(getattr(merged, name)[key_a],
                              getattr(g, name)[key_b]), name


def test_extract_empty_group():
    g = two_group_scene(make_cube_mesh())
    with pytest.raises(EmptyGroup):
        extract_group(g, 13, make_cube_mesh())


def test_transfer_uniform_scale():
    mesh = make_cube_mesh()
    big = make_cube_mesh(scale=1.2)
    g = two_group_scene(mesh)
    out = transfer_group(g, mesh, big)
    assert np.allclose(out.offsets, g.offsets * 1.2, atol=1e-12)
    assert np.allclose(out.log_scale, g.log_scale + np.log(1.2), atol=1e-12)
    # identity transfer is bit-exact
    same = transfer_group(g, mesh, mesh)
    assert same.equals(g)


def test_transfer_rejects_topology_mismatch(cylinder_fixture):
    cyl, _, _ = cylinder_fixture
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    with pytest.raises(TopologyMismatch):
        transfer_group(g, mesh, cyl)


def test_transfer_locality():
    """Stretching one face's vertices only affects splats on that face."""
    mesh = make_cube_mesh()
    g = two_group_scene(mesh)
    verts = mesh.vertices.copy()
    target = SkinnedMesh(vertices=verts * [1.0, 1.0, 1.3], faces=mesh.faces,
                         joint_names=mesh.joint_names,
                         joint_parents=mesh.joint_parents,
                         joint_transforms=mesh.joint_transforms,
                         skin_weights=mesh.skin_weights)
    out = transfer_group(g, mesh, target)
    # z-normal faces keep their in-plane axes unchanged: the offsets of
    # splats on faces whose triangle lies in a z=const plane scale only
    # along the normal axis
    fv = mesh.face_vertices()
    flat_z = np.ptp(fv[:, :, 2], axis=1) < 1e-12
    on_flat = flat_z[g.face_index]
    assert np.allclose(out.offsets[on_flat, :2], g.offsets[on_flat, :2],
                       atol=1e-12)
