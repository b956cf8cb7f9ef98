"""Linear blend skinning and canonical-to-posed Gaussian transport.

Reposing transports each embedded Gaussian by its triangle's frame change:
rotation from the facet basis change, scale and offsets by per-axis length
ratios (tangent edge, triangle height, sqrt of area).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (frame_rotation_matrices, matrix_to_quat,
                       quat_to_matrix, triangle_frames)
from .scene import GaussianSet, SkinnedMesh


@dataclass
class Pose:
    """Per-joint rigid transforms relative to canonical, plus a root transform.

    joint_transforms: (J,4,4), applied to canonical-space vertices.
    root: (4,4) global rigid transform applied last.
    """

    joint_transforms: np.ndarray
    root: np.ndarray = None

    def __post_init__(self):
        self.joint_transforms = np.asarray(self.joint_transforms, dtype=np.float64)
        if self.root is None:
            self.root = np.eye(4)
        self.root = np.asarray(self.root, dtype=np.float64)
        for t in self.joint_transforms:
            r = t[:3, :3]
            if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
                raise ValueError("joint rotation block not orthonormal within 1e-6")

    @staticmethod
    def identity(n_joints):
        return Pose(np.broadcast_to(np.eye(4), (n_joints, 4, 4)).copy())


def pose_mesh(mesh: SkinnedMesh, pose: Pose):
    """LBS: v' = root . sum_j w_vj T_j v.  Returns posed vertices (N,3)."""
    if pose.joint_transforms.shape[0] != mesh.n_joints:
        raise ValueError("pose joint count does not match mesh")
    v = mesh.vertices
    # Blend the full 3x4 transform per vertex, then apply it once.
    blended = np.einsum("nj,jab->nab", mesh.skin_weights,
                        pose.joint_transforms[:, :3, :])  # (N,3,4)
    posed = np.einsum("nab,nb->na", blended[:, :, :3], v) + blended[:, :, 3]
    r, t = pose.root[:3, :3], pose.root[:3, 3]
    return posed @ r.T + t


@dataclass
class FaceTransport:
    """Per-face frame change between canonical and posed vertices.

    origins/bases for both spaces, the frame-change rotations, and per-axis
    length ratios (r_i, r_j, r_k) per face.  Constant with respect to
    Gaussian parameters, so the backward pass treats it as data.
    """

    origins_cano: np.ndarray
    bases_cano: np.ndarray
    origins_posed: np.ndarray
    bases_posed: np.ndarray
    rotations: np.ndarray       # (F,3,3) posed = R . canonical
    ratios: np.ndarray          # (F,3)


def face_axis_ratios(tri_cano, tri_posed):
    """Per-axis stretch ratios between canonical and posed triangles.

    tangent   : first-edge length ratio |e1'|/|e1|
    bitangent : triangle height ratio (2A'/|e1'|)/(2A/|e1|)
    normal    : sqrt of area ratio
    All three reduce to k under a uniform scale by k.
    """
    e1c = tri_cano[:, 1] - tri_cano[:, 0]
    e1p = tri_posed[:, 1] - tri_posed[:, 0]
    len_c = np.linalg.norm(e1c, axis=1)
    len_p = np.linalg.norm(e1p, axis=1)
    area_c = 0.5 * np.linalg.norm(
        np.cross(e1c, tri_cano[:, 2] - tri_cano[:, 0]), axis=1)
    area_p = 0.5 * np.linalg.norm(
        np.cross(e1p, tri_posed[:, 2] - tri_posed[:, 0]), axis=1)
    r_i = len_p / len_c
    r_j = (area_p / len_p) / (area_c / len_c)
    r_k = np.sqrt(area_p / area_c)
    return np.stack([r_i, r_j, r_k], axis=1)


def face_transport(mesh: SkinnedMesh, posed_vertices):
    tri_c = mesh.face_vertices()
    tri_p = mesh.face_vertices(posed_vertices)
    oc, bc = triangle_frames(tri_c[:, 0], tri_c[:, 1], tri_c[:, 2])
    op, bp = triangle_frames(tri_p[:, 0], tri_p[:, 1], tri_p[:, 2])
    rot = frame_rotation_matrices(bc, bp)
    ratios = face_axis_ratios(tri_c, tri_p)
    return FaceTransport(oc, bc, op, bp, rot, ratios)


def frame_rotation_quaternion(basis_canonical, basis_posed):
    """Quaternion of the rotation taking canonical frame axes to posed axes."""
    return matrix_to_quat(frame_rotation_matrices(basis_canonical, basis_posed))


@dataclass
class Reposed:
    """World-space splat state after transport (and optional deformation).

    positions (N,3); rotations (N,3,3) world rotation matrices;
    scales (N,3) positive world scales.  transport is kept for the backward
    chain into embedding coordinates.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    transport: FaceTransport = None


def repose(gaussians: GaussianSet, mesh: SkinnedMesh, posed_vertices=None):
    """Transport all Gaussians from canonical to posed space.

    With posed_vertices None the canonical mesh is used (ratios are all 1 and
    frame rotations identity, so only embedding resolution happens).
    """
    if posed_vertices is None:
        posed_vertices = mesh.vertices
    t = face_transport(mesh, posed_vertices)
    f = gaussians.face_index
    r = t.ratios[f]                               # (N,3)
    offs = gaussians.offsets * r
    positions = t.origins_posed[f] + np.einsum(
        "nij,nj->ni", t.bases_posed[f], offs)
    local = quat_to_matrix(gaussians.rotation)     # (N,3,3)
    rotations = np.einsum("nij,njk->nik", t.rotations[f], local)
    scales = np.exp(gaussians.log_scale) * r
    return Reposed(positions, rotations, scales, t)


__all__ = ["Pose", "pose_mesh", "FaceTransport", "face_transport",
           "face_axis_ratios", "frame_rotation_quaternion", "Reposed",
           "repose"]
