"""Synthetic avatar fixtures: a two-bone capped cylinder with clothing
bands, ground-truth Gaussian scenes, orbit cameras, and an oscillating
deformation sequence.  Everything the tests and example scripts train
against comes from here.
"""

from __future__ import annotations

import numpy as np

from .geometry import _C0
from .lifecycle import build_body_gaussians
from .losses import TrainingView
from .rasterizer import RasterConfig, render
from .scene import (Camera, GaussianSet, IDENTITY_DIM, LAYER_ASSET,
                    SkinnedMesh, embed_points, mesh_frames)
from .skinning import Pose, pose_mesh, repose

TOP_CATEGORY = 4     # "Top"
PANTS_CATEGORY = 6   # "Pants"

TOP_COLOR = (0.85, 0.2, 0.15)
PANTS_COLOR = (0.15, 0.25, 0.8)


def look_at_camera(eye, target, width=64, height=64, focal=None, up=(0, 1, 0),
                   near=0.05):
    """Camera at `eye` with +z pointing toward `target`, image y downward."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    wtc = np.eye(4)
    wtc[:3, :3] = r
    wtc[:3, 3] = -r @ eye
    if focal is None:
        focal = 1.1 * max(width, height)
    return Camera(world_to_cam=wtc, fx=focal, fy=focal,
                  cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, near=near)


def cylinder_mesh(n_seg=16, n_rings=9, radius=0.22, height=1.6):
    """Watertight capped cylinder along +y with a two-bone skeleton.

    The lower bone owns y < 0.4h, the upper bone y > 0.6h, with a linear
    blend between.  Top-cap faces are tagged as the "face" region.
    """
    theta = np.linspace(0.0, 2 * np.pi, n_seg, endpoint=False)
    ys = np.linspace(0.0, height, n_rings)
    ring = np.stack([radius * np.cos(theta), np.zeros(n_seg),
                     radius * np.sin(theta)], axis=1)
    verts = np.concatenate([ring + np.array([0.0, y, 0.0]) for y in ys])
    bottom_c = len(verts)
    top_c = bottom_c + 1
    verts = np.concatenate([verts, [[0.0, 0.0, 0.0], [0.0, height, 0.0]]])

    faces = []
    for i in range(n_rings - 1):
        for j in range(n_seg):
            a = i * n_seg + j
            b = (i + 1) * n_seg + j
            a1 = i * n_seg + (j + 1) % n_seg
            b1 = (i + 1) * n_seg + (j + 1) % n_seg
            faces.append([a, b, a1])    # outward winding
            faces.append([b, b1, a1])
    for j in range(n_seg):              # bottom cap, normal -y
        faces.append([bottom_c, j, (j + 1) % n_seg])
    top0 = (n_rings - 1) * n_seg
    top_faces = []
    for j in range(n_seg):              # top cap, normal +y
        top_faces.append(len(faces))
        faces.append([top_c, top0 + (j + 1) % n_seg, top0 + j])
    faces = np.asarray(faces, dtype=np.int64)

    w_upper = np.clip((verts[:, 1] - 0.4 * height) / (0.2 * height), 0.0, 1.0)
    weights = np.stack([1.0 - w_upper, w_upper], axis=1)
    return SkinnedMesh(
        vertices=verts, faces=faces,
        joint_names=["lower", "upper"],
        joint_parents=np.array([-1, 0], dtype=np.int64),
        joint_transforms=np.stack([np.eye(4), np.eye(4)]),
        skin_weights=weights,
        face_regions={"face": np.asarray(top_faces, dtype=np.int64)})


def bend_pose(mesh: SkinnedMesh, angle, axis="z"):
    """Bend the upper bone by `angle` about the mid-height pivot."""
    height = mesh.vertices[:, 1].max()
    pivot = np.array([0.0, 0.5 * height, 0.0])
    c, s = np.cos(angle), np.sin(angle)
    rot = np.eye(4)
    if axis == "z":
        rot[:2, :2] = [[c, -s], [s, c]]
    else:
        rot[0, 0], rot[0, 2] = c, s
        rot[2, 0], rot[2, 2] = -s, c
    t_in, t_out = np.eye(4), np.eye(4)
    t_in[:3, 3] = -pivot
    t_out[:3, 3] = pivot
    return Pose(joint_transforms=np.stack([np.eye(4), t_out @ rot @ t_in]))


def _band_gaussians(mesh, category, y_range, color, rng, n=220,
                    offset=0.035, scale=0.045):
    """Asset Gaussians hovering outside the cylinder within a height band."""
    origins, bases = mesh_frames(mesh)
    centroids = mesh.face_vertices().mean(axis=1)
    normals = bases[:, :, 2]
    side = np.abs(normals[:, 1]) < 0.5  # exclude caps
    band = side & (centroids[:, 1] >= y_range[0]) & \
        (centroids[:, 1] <= y_range[1])
    cand = np.nonzero(band)[0]
    fi = cand[rng.integers(0, len(cand), n)]
    # jitter within the face plane, then push outward along the normal
    tri = mesh.face_vertices()[fi]
    bary = rng.dirichlet([2.0, 2.0, 2.0], n)
    pts = np.einsum("nb,nbk->nk", bary, tri) + offset * normals[fi]
    offsets = embed_points(pts, fi, mesh)

    identity = np.zeros((n, IDENTITY_DIM))
    identity[:, category] = 6.0
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = np.asarray(color) / _C0 \
        + rng.normal(0.0, 0.02, (n, 3))
    log_scale = np.log(scale) + rng.normal(0.0, 0.1, (n, 3))
    log_scale[:, 2] -= 1.0  # flatter along the normal
    return GaussianSet(
        face_index=fi, offsets=offsets,
        rotation=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scale=log_scale,
        opacity_logit=np.full(n, 2.5),
        sh=sh, identity=identity,
        layer=np.full(n, LAYER_ASSET, dtype=np.uint8),
        frozen=np.zeros(n, dtype=bool))


def ground_truth_scene(mesh: SkinnedMesh, seed=0, per_band=220):
    """Body layer plus a red Top band and a blue Pants band."""
    rng = np.random.default_rng(seed)
    height = mesh.vertices[:, 1].max()
    body = build_body_gaussians(mesh, per_face_count=1)
    # give the skin a warm tone so inpainting has a real target
    body.sh[:, 0, :] = np.array([0.8, 0.62, 0.5]) / _C0
    top = _band_gaussians(mesh, TOP_CATEGORY, (0.55 * height, 0.9 * height),
                          TOP_COLOR, rng, n=per_band)
    pants = _band_gaussians(mesh, PANTS_CATEGORY,
                            (0.08 * height, 0.45 * height),
                            PANTS_COLOR, rng, n=per_band)
    return GaussianSet.concatenate([body, top, pants])


def orbit_cameras(mesh: SkinnedMesh, n_views=16, width=64, height=64,
                  distance=2.6):
    h = mesh.vertices[:, 1].max()
    center = np.array([0.0, 0.5 * h, 0.0])
    cams = []
    for k in range(n_views):
        phi = 2 * np.pi * k / n_views
        eye = center + distance * np.array([np.cos(phi), 0.12, np.sin(phi)])
        cams.append(look_at_camera(eye, center, width, height))
    return cams


def make_views(scene: GaussianSet, mesh: SkinnedMesh, cams,
               raster_cfg: RasterConfig = None):
    """Render ground-truth images and identity-argmax masks per camera."""
    reposed = repose(scene, mesh)
    views = []
    for cam in cams:
        out, _ = render(scene, reposed, cam, raster_cfg)
        labels = out.identity.argmax(axis=2).astype(np.uint8)
        labels[out.alpha < 0.5] = 0
        views.append(TrainingView(cam=cam, image=out.color.copy(),
                                  mask=labels))
    return views


# ---------------------------------------------------------------------------
# oscillating-band deformation fixture
# ---------------------------------------------------------------------------

def oscillation_offsets(scene: GaussianSet, mesh: SkinnedMesh, t,
                        amplitude=0.06):
    """Ground-truth world Δposition at time t: the Top band breathes
    radially with sin(2πt); everything else stays put."""
    reposed = repose(scene, mesh)
    target = (scene.layer == LAYER_ASSET) & \
        (scene.categories() == TOP_CATEGORY)
    d = np.zeros((len(scene), 3))
    radial = reposed.positions[target].copy()
    radial[:, 1] = 0.0
    radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-9)
    d[target] = amplitude * np.sin(2 * np.pi * t) * radial
    return d


def oscillation_frames(scene: GaussianSet, mesh: SkinnedMesh, cam,
                       n_frames=8, amplitude=0.06,
                       raster_cfg: RasterConfig = None):
    """Reference frames of the breathing Top band.

    Returns (FrameSample list, per-frame ground-truth Δposition arrays).
    Timestamps run 0..1 inclusive; the pose is the rest pose throughout so
    the deformation is the only time-varying signal.
    """
    from .deform import FrameSample

    rest = Pose(joint_transforms=np.stack([np.eye(4), np.eye(4)]))
    times = np.linspace(0.0, 1.0, n_frames)
    frames, gt = [], []
    for t in times:
        d = oscillation_offsets(scene, mesh, t, amplitude)
        reposed = repose(scene, mesh)
        reposed.positions = reposed.positions + d
        out, _ = render(scene, reposed, cam, raster_cfg)
        frames.append(FrameSample(t=float(t), pose=rest, cam=cam,
                                  image=out.color.copy()))
        gt.append(d)
    return frames, gt
