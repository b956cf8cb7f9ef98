import numpy as np
import pytest

from splatavatar.scene import (Camera, GaussianSet, IDENTITY_DIM, LAYER_ASSET,
                               SkinnedMesh, embed_points)

CUBE_FACES = np.array([
    [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
    [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
    [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]], dtype=np.int64)


def make_cube_mesh(scale=1.0):
    """Unit cube centered at the origin, one root joint, outward normals."""
    verts = np.array([[x, y, z] for x in (-.5, .5) for y in (-.5, .5)
                      for z in (-.5, .5)], dtype=np.float64) * scale
    return SkinnedMesh(
        vertices=verts, faces=CUBE_FACES.copy(),
        joint_names=["root"], joint_parents=np.array([-1], dtype=np.int64),
        joint_transforms=np.eye(4)[None].copy(),
        skin_weights=np.ones((8, 1)))


def random_scene(mesh, n, seed=0, category=4, radius=1.15, scale=0.06,
                 sh_degree=0):
    """Asset Gaussians hovering near the mesh surface, single category."""
    rng = np.random.default_rng(seed)
    tri = mesh.face_vertices()
    fi = rng.integers(0, len(tri), n)
    pts = tri[fi].mean(axis=1) * radius + rng.normal(0, 0.02, (n, 3))
    identity = np.zeros((n, IDENTITY_DIM))
    identity[:, category] = 4.0
    identity += rng.normal(0, 0.1, identity.shape)
    n_basis = (sh_degree + 1) ** 2
    sh = rng.normal(0.5, 0.2, (n, n_basis, 3))
    return GaussianSet(
        face_index=fi, offsets=embed_points(pts, fi, mesh),
        rotation=rng.normal(size=(n, 4)),
        log_scale=np.log(scale) + rng.normal(0, 0.2, (n, 3)),
        opacity_logit=rng.normal(0.5, 0.5, n),
        sh=sh, identity=identity,
        layer=np.full(n, LAYER_ASSET, dtype=np.uint8),
        frozen=np.zeros(n, dtype=bool))


def frontal_camera(width=32, height=32, distance=2.5, focal=None):
    wtc = np.eye(4)
    wtc[0, 0] = -1.0
    wtc[2, 2] = -1.0
    wtc[2, 3] = distance
    return Camera(world_to_cam=wtc,
                  fx=focal or 1.2 * width, fy=focal or 1.2 * width,
                  cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height)


@pytest.fixture
def cube_mesh():
    return make_cube_mesh()


@pytest.fixture(scope="session")
def cylinder_fixture():
    """Shared small cylinder avatar: (mesh, ground-truth scene, cameras)."""
    from splatavatar.synthetic import (cylinder_mesh, ground_truth_scene,
                                       orbit_cameras)
    mesh = cylinder_mesh(n_seg=12, n_rings=6)
    scene = ground_truth_scene(mesh, seed=0, per_band=120)
    cams = orbit_cameras(mesh, n_views=4, width=48, height=48)
    return mesh, scene, cams
