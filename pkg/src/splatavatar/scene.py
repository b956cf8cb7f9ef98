"""Layered avatar data model: Gaussian populations, skinned mesh, cameras.

GaussianSet is structure-of-arrays; every per-Gaussian attribute is a numpy
array indexed by the same axis, so pruning/densification are plain fancy
indexing.  Positions are never stored directly: each Gaussian is embedded in
a triangle-local frame (face index plus offsets along tangent/bitangent/
normal) and world positions are derived from the posed mesh.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import quat_normalize, sh_dim, triangle_frames

IDENTITY_DIM = 15

CATEGORY_NAMES = (
    "Background", "Hat", "Hair", "Sunglasses", "Upper-clothes", "Skirt",
    "Pants", "Dress", "Belt", "Left-shoe", "Right-shoe", "Face", "Skin",
    "Bag", "Scarf",
)

LAYER_BODY = 0
LAYER_ASSET = 1

SKIN_CATEGORY = 12
FACE_CATEGORY = 11


class InvalidCategory(ValueError):
    pass


def category_name(index):
    if not 0 <= index < IDENTITY_DIM:
        raise InvalidCategory(f"category index {index} outside 0..14")
    return CATEGORY_NAMES[index]


@dataclass
class GaussianSet:
    """Structure-of-arrays splat population.

    face_index    (N,)  int64    embedding triangle per Gaussian
    offsets       (N,3) float64  (sigma, beta, gamma) in the triangle frame
    rotation      (N,4) float64  local rotation residual, raw quaternion
    log_scale     (N,3) float64  log of canonical per-axis scale
    opacity_logit (N,)  float64  opacity = sigmoid(opacity_logit)
    sh            (N,B,3) float64  SH coefficients, B = (degree+1)^2
    identity      (N,15) float64 category logits
    layer         (N,)  uint8    LAYER_BODY or LAYER_ASSET
    frozen        (N,)  bool     excluded from optimization when True
    """

    face_index: np.ndarray
    offsets: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    identity: np.ndarray
    layer: np.ndarray
    frozen: np.ndarray

    def __post_init__(self):
        n = len(self.face_index)
        assert self.offsets.shape == (n, 3)
        assert self.rotation.shape == (n, 4)
        assert self.log_scale.shape == (n, 3)
        assert self.opacity_logit.shape == (n,)
        assert self.sh.ndim == 3 and self.sh.shape[0] == n and self.sh.shape[2] == 3
        assert self.identity.shape == (n, IDENTITY_DIM)
        assert self.layer.shape == (n,)
        assert self.frozen.shape == (n,)

    def __len__(self):
        return len(self.face_index)

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def opacity(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def select(self, mask_or_index):
        """New GaussianSet holding the selected rows (copies)."""
        return GaussianSet(
            face_index=self.face_index[mask_or_index].copy(),
            offsets=self.offsets[mask_or_index].copy(),
            rotation=self.rotation[mask_or_index].copy(),
            log_scale=self.log_scale[mask_or_index].copy(),
            opacity_logit=self.opacity_logit[mask_or_index].copy(),
            sh=self.sh[mask_or_index].copy(),
            identity=self.identity[mask_or_index].copy(),
            layer=self.layer[mask_or_index].copy(),
            frozen=self.frozen[mask_or_index].copy(),
        )

    def copy(self):
        return self.select(slice(None))

    def categories(self):
        """Per-Gaussian argmax of the identity logits (ties break low).

        Channel 0 (Background) is reserved for empty pixels and cannot be
        claimed by a Gaussian: splats are matter, so the argmax runs over
        the material categories 1..14 only.  The background logit still
        participates in rasterized blending and the 2D identity loss.
        """
        return 1 + np.argmax(self.identity[:, 1:], axis=1)

    @staticmethod
    def concatenate(sets):
        sets = list(sets)
        return GaussianSet(
            face_index=np.concatenate([s.face_index for s in sets]),
            offsets=np.concatenate([s.offsets for s in sets]),
            rotation=np.concatenate([s.rotation for s in sets]),
            log_scale=np.concatenate([s.log_scale for s in sets]),
            opacity_logit=np.concatenate([s.opacity_logit for s in sets]),
            sh=np.concatenate([s.sh for s in sets]),
            identity=np.concatenate([s.identity for s in sets]),
            layer=np.concatenate([s.layer for s in sets]),
            frozen=np.concatenate([s.frozen for s in sets]),
        )

    @staticmethod
    def empty(sh_degree=0):
        b = sh_dim(sh_degree)
        return GaussianSet(
            face_index=np.zeros(0, dtype=np.int64),
            offsets=np.zeros((0, 3)),
            rotation=np.zeros((0, 4)),
            log_scale=np.zeros((0, 3)),
            opacity_logit=np.zeros(0),
            sh=np.zeros((0, b, 3)),
            identity=np.zeros((0, IDENTITY_DIM)),
            layer=np.zeros(0, dtype=np.uint8),
            frozen=np.zeros(0, dtype=bool),
        )

    def equals(self, other):
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("face_index", "offsets", "rotation", "log_scale",
                      "opacity_logit", "sh", "identity", "layer", "frozen")
        )


def category_of(gaussians: GaussianSet, index: int) -> int:
    """Category (argmax identity logit, ties toward low index) of one Gaussian."""
    return int(gaussians.categories()[index])


@dataclass
class SkinnedMesh:
    """Canonical triangle mesh with a joint hierarchy and skinning weights.

    vertices      (N,3) float64  canonical positions
    faces         (F,3) int64
    joint_names   list[str], length J
    joint_parents (J,) int64, -1 for roots
    joint_transforms (J,4,4) float64  canonical joint-to-world transforms
    skin_weights  (N,J) float64  rows sum to 1, non-negative
    face_regions  optional dict name -> (K,) int64 face indices
    """

    vertices: np.ndarray
    faces: np.ndarray
    joint_names: list
    joint_parents: np.ndarray
    joint_transforms: np.ndarray
    skin_weights: np.ndarray
    face_regions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        row_sums = self.skin_weights.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-6):
            raise ValueError("skin weight rows must sum to 1 within 1e-6")
        if np.any(self.skin_weights < -1e-12):
            raise ValueError("skin weights must be non-negative")
        if np.any(self.faces < 0) or np.any(self.faces >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def n_joints(self):
        return len(self.joint_names)

    def content_hash(self):
        """Hash binding splat files to the mesh their embeddings refer to."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces).tobytes())
        return h.hexdigest()

    def face_vertices(self, vertices=None):
        """(F,3,3) triangle vertex array, optionally from posed vertices."""
        v = self.vertices if vertices is None else vertices
        return v[self.faces]


def mesh_frames(mesh: SkinnedMesh, vertices=None):
    """Per-face (origins (F,3), bases (F,3,3)) for canonical or posed vertices."""
    tri = mesh.face_vertices(vertices)
    return triangle_frames(tri[:, 0], tri[:, 1], tri[:, 2])


def resolve_positions(gaussians: GaussianSet, mesh: SkinnedMesh, vertices=None,
                      offset_scale=None):
    """World positions of all Gaussians on the (optionally posed) mesh.

    offset_scale: optional (N,3) per-axis multipliers applied to the stored
    offsets (used by reposing to stretch offsets with the triangle).
    """
    origins, bases = mesh_frames(mesh, vertices)
    f = gaussians.face_index
    offs = gaussians.offsets
    if offset_scale is not None:
        offs = offs * offset_scale
    return origins[f] + np.einsum("nij,nj->ni", bases[f], offs)


def embed_points(points, face_index, mesh: SkinnedMesh, vertices=None):
    """Inverse of resolve_positions: world points -> (sigma, beta, gamma)."""
    origins, bases = mesh_frames(mesh, vertices)
    rel = points - origins[face_index]
    return np.einsum("nji,nj->ni", bases[face_index], rel)


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform."""

    world_to_cam: np.ndarray  # (4,4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def normalize_set_rotations(gaussians: GaussianSet):
    """Renormalize stored quaternions in place (canonical w >= 0 form)."""
    gaussians.rotation = quat_normalize(gaussians.rotation, canonical=True)
    return gaussians


__all__ = [
    "GaussianSet", "SkinnedMesh", "Camera", "CATEGORY_NAMES", "IDENTITY_DIM",
    "LAYER_BODY", "LAYER_ASSET", "SKIN_CATEGORY", "FACE_CATEGORY",
    "InvalidCategory", "category_name", "category_of", "mesh_frames",
    "resolve_positions", "embed_points", "normalize_set_rotations", "replace",
]
