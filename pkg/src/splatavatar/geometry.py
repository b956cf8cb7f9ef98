"""Shared math substrate: quaternions, triangle-local frames, spherical harmonics.

All functions accept either single items or leading batch dimensions where
noted.  Everything is float64 and pure; no state.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DegenerateTriangle",
    "quat_normalize",
    "quat_multiply",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_rotate",
    "triangle_frames",
    "frame_rotation_matrices",
    "sh_dim",
    "sh_basis",
    "sh_basis_grad",
    "eval_sh",
]

AREA_EPS = 1e-12


class DegenerateTriangle(ValueError):
    """Raised when a triangle's area is below the degeneracy threshold."""


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q, canonical=False):
    """Normalize quaternion(s) to unit length.

    With ``canonical=True`` the sign is fixed so w >= 0 (stable for
    serialization and comparison).
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    out = q / n
    if canonical:
        flip = out[..., 0:1] < 0.0
        out = np.where(flip, -out, out)
    return out


def quat_multiply(a, b):
    """Hamilton product a*b; composing rotations: rotate by b, then a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    """Unit quaternion(s) -> rotation matrix/matrices (..., 3, 3).

    The input is normalized internally, so raw (unnormalized) optimizer
    state can be passed directly.
    """
    q = quat_normalize(q)
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def matrix_to_quat(m):
    """Rotation matrix/matrices -> unit quaternion(s), w >= 0 canonical form.

    Shepperd's method: pick the largest of the four candidate pivots for
    numerical stability near each branch.
    """
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    mm = m.reshape((-1, 3, 3))
    n = mm.shape[0]
    q = np.empty((n, 4), dtype=np.float64)
    t0 = 1.0 + mm[:, 0, 0] + mm[:, 1, 1] + mm[:, 2, 2]
    t1 = 1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2]
    t2 = 1.0 - mm[:, 0, 0] + mm[:, 1, 1] - mm[:, 2, 2]
    t3 = 1.0 - mm[:, 0, 0] - mm[:, 1, 1] + mm[:, 2, 2]
    choice = np.argmax(np.stack([t0, t1, t2, t3], axis=-1), axis=-1)
    for i in range(n):
        a = mm[i]
        c = choice[i]
        if c == 0:
            s = 2.0 * np.sqrt(t0[i])
            q[i] = (0.25 * s, (a[2, 1] - a[1, 2]) / s,
                    (a[0, 2] - a[2, 0]) / s, (a[1, 0] - a[0, 1]) / s)
        elif c == 1:
            s = 2.0 * np.sqrt(t1[i])
            q[i] = ((a[2, 1] - a[1, 2]) / s, 0.25 * s,
                    (a[0, 1] + a[1, 0]) / s, (a[0, 2] + a[2, 0]) / s)
        elif c == 2:
            s = 2.0 * np.sqrt(t2[i])
            q[i] = ((a[0, 2] - a[2, 0]) / s, (a[0, 1] + a[1, 0]) / s,
                    0.25 * s, (a[1, 2] + a[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(t3[i])
            q[i] = ((a[1, 0] - a[0, 1]) / s, (a[0, 2] + a[2, 0]) / s,
                    (a[1, 2] + a[2, 1]) / s, 0.25 * s)
    return quat_normalize(q.reshape(batch + (4,)), canonical=True)


def quat_rotate(q, v):
    """Rotate vector(s) v by quaternion(s) q."""
    m = quat_to_matrix(q)
    return np.einsum("...ij,...j->...i", m, np.asarray(v, dtype=np.float64))


# ---------------------------------------------------------------------------
# triangle frames
# ---------------------------------------------------------------------------

def triangle_frames(v0, v1, v2):
    """Local frames of triangles given vertex arrays of shape (..., 3).

    Returns (origin, basis) where basis has columns (tangent i, bitangent j,
    normal k):
      origin = vertex mean
      i      = normalize(v1 - v0)
      k      = normalize((v1 - v0) x (v2 - v0))
      j      = k x i

    Raises DegenerateTriangle if any triangle's area is <= 1e-12.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    e1 = v1 - v0
    e2 = v2 - v0
    cross = np.cross(e1, e2)
    cross_norm = np.linalg.norm(cross, axis=-1)
    area = 0.5 * cross_norm
    if np.any(area <= AREA_EPS):
        raise DegenerateTriangle(
            f"triangle area {float(np.min(area)):.3e} below threshold {AREA_EPS:.0e}"
        )
    origin = (v0 + v1 + v2) / 3.0
    i = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    k = cross / cross_norm[..., None]
    j = np.cross(k, i)
    basis = np.stack([i, j, k], axis=-1)  # columns
    return origin, basis


def frame_rotation_matrices(basis_canonical, basis_posed):
    """Rotation taking canonical frame axes to posed frame axes.

    R = B_posed @ B_canonical^T for orthonormal column bases.
    """
    return np.einsum("...ik,...jk->...ij", basis_posed, basis_canonical)


# ---------------------------------------------------------------------------
# real spherical harmonics (degrees 0..3), 3DGS constant convention
# ---------------------------------------------------------------------------

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)

MAX_SH_DEGREE = 3


def sh_dim(degree):
    """Number of SH basis functions for a given maximum degree."""
    return (degree + 1) ** 2


def sh_basis(degree, dirs):
    """Real SH basis values at unit directions, shape (..., (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (sh_dim(degree),), dtype=np.float64)
    out[..., 0] = _C0
    if degree >= 1:
        out[..., 1] = -_C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = _C2[0] * xy
        out[..., 5] = _C2[1] * yz
        out[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = _C2[3] * xz
        out[..., 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = _C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = _C3[5] * z * (xx - yy)
        out[..., 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(degree, dirs):
    """d(basis)/d(direction): shape (..., (degree+1)^2, 3).

    Derivative of the polynomial basis with respect to the raw direction
    components (the caller chains through any normalization).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g = np.zeros(dirs.shape[:-1] + (sh_dim(degree), 3), dtype=np.float64)
    zero = np.zeros_like(x)
    if degree >= 1:
        g[..., 1, 1] = -_C1
        g[..., 2, 2] = _C1
        g[..., 3, 0] = -_C1
    if degree >= 2:
        g[..., 4, 0] = _C2[0] * y
        g[..., 4, 1] = _C2[0] * x
        g[..., 5, 1] = _C2[1] * z
        g[..., 5, 2] = _C2[1] * y
        g[..., 6, 0] = _C2[2] * (-2.0 * x)
        g[..., 6, 1] = _C2[2] * (-2.0 * y)
        g[..., 6, 2] = _C2[2] * (4.0 * z)
        g[..., 7, 0] = _C2[3] * z
        g[..., 7, 2] = _C2[3] * x
        g[..., 8, 0] = _C2[4] * (2.0 * x)
        g[..., 8, 1] = _C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = _C3[0] * (6.0 * x * y)
        g[..., 9, 1] = _C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 9, 2] = zero
        g[..., 10, 0] = _C3[1] * y * z
        g[..., 10, 1] = _C3[1] * x * z
        g[..., 10, 2] = _C3[1] * x * y
        g[..., 11, 0] = _C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = _C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = _C3[2] * (8.0 * y * z)
        g[..., 12, 0] = _C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = _C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = _C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = _C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = _C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = _C3[4] * (8.0 * x * z)
        g[..., 14, 0] = _C3[5] * (2.0 * x * z)
        g[..., 14, 1] = _C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = _C3[5] * (xx - yy)
        g[..., 15, 0] = _C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = _C3[6] * (-6.0 * x * y)
        g[..., 15, 2] = zero
    return g


def eval_sh(coeffs, view_dir, degree=None):
    """Evaluate view-dependent color from SH coefficients.

    coeffs: (..., n_basis, 3) with n_basis = (degree+1)^2.
    view_dir: unit direction(s) broadcastable to the leading shape.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if degree is None:
        degree = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    basis = sh_basis(degree, view_dir)
    return np.einsum("...b,...bc->...c", basis, coeffs)
