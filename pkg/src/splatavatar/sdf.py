"""Signed distance to a triangle mesh via angle-weighted pseudo-normals.

Unsigned distance is exact point-to-triangle; the sign comes from the
pseudo-normal at the nearest feature (face / edge / vertex), negative
inside.  Meshes here are small (hundreds of faces), so queries are brute
force over faces, vectorized over query points.
"""

from __future__ import annotations

import numpy as np

REGION_FACE = 6


def closest_point_on_triangles(points, tri):
    """Closest points from each query point to each triangle.

    points: (P,3); tri: (F,3,3).
    Returns (closest (P,F,3), region (P,F) int8) with region codes
    0,1,2 = vertex A/B/C, 3,4,5 = edge AB/BC/CA, 6 = face interior.
    """
    a, b, c = tri[:, 0][None], tri[:, 1][None], tri[:, 2][None]  # (1,F,3)
    p = points[:, None, :]                                       # (P,1,3)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom
    t_ab = np.nan_to_num(t_ab)
    t_ac = np.nan_to_num(t_ac)
    t_bc = np.nan_to_num(t_bc)
    v_face = np.nan_to_num(v_face)
    w_face = np.nan_to_num(w_face)

    cond_a = (d1 <= 0) & (d2 <= 0)
    cond_b = (d3 >= 0) & (d4 <= d3)
    cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    cond_c = (d6 >= 0) & (d5 <= d6)
    cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    cond_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    region = np.full(d1.shape, REGION_FACE, dtype=np.int8)
    closest = a + ab * v_face[..., None] + ac * w_face[..., None]

    # apply in reverse priority so earlier conditions win
    sel_bc = cond_bc & ~(cond_a | cond_b | cond_ab | cond_c | cond_ac)
    region[sel_bc] = 4
    closest = np.where(sel_bc[..., None], b + (c - b) * t_bc[..., None], closest)
    sel_ac = cond_ac & ~(cond_a | cond_b | cond_ab | cond_c)
    region[sel_ac] = 5
    closest = np.where(sel_ac[..., None], a + ac * t_ac[..., None], closest)
    sel_c = cond_c & ~(cond_a | cond_b | cond_ab)
    region[sel_c] = 2
    closest = np.where(sel_c[..., None], np.broadcast_to(c, closest.shape), closest)
    sel_ab = cond_ab & ~(cond_a | cond_b)
    region[sel_ab] = 3
    closest = np.where(sel_ab[..., None], a + ab * t_ab[..., None], closest)
    sel_b = cond_b & ~cond_a
    region[sel_b] = 1
    closest = np.where(sel_b[..., None], np.broadcast_to(b, closest.shape), closest)
    region[cond_a] = 0
    closest = np.where(cond_a[..., None], np.broadcast_to(a, closest.shape), closest)
    return closest, region


class MeshSDF:
    """Signed distance queries against one (posed) triangle mesh snapshot."""

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.tri = self.vertices[self.faces]
        e1 = self.tri[:, 1] - self.tri[:, 0]
        e2 = self.tri[:, 2] - self.tri[:, 0]
        cross = np.cross(e1, e2)
        norms = np.linalg.norm(cross, axis=1, keepdims=True)
        self.face_normals = cross / norms
        self._build_pseudo_normals()

    def _build_pseudo_normals(self):
        f = self.faces
        fn = self.face_normals
        # vertex pseudo-normals: incident-angle weighted face normals
        vn = np.zeros_like(self.vertices)
        for corner in range(3):
            vi = f[:, corner]
            e_a = self.tri[:, (corner + 1) % 3] - self.tri[:, corner]
            e_b = self.tri[:, (corner + 2) % 3] - self.tri[:, corner]
            cosang = np.einsum("fk,fk->f", e_a, e_b) / (
                np.linalg.norm(e_a, axis=1) * np.linalg.norm(e_b, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, vi, fn * ang[:, None])
        self.vertex_normals = vn / np.maximum(
            np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)
        # edge pseudo-normals: sum of the <=2 adjacent face normals
        edge_map = {}
        for fi in range(len(f)):
            for corner in range(3):
                key = tuple(sorted((f[fi, corner], f[fi, (corner + 1) % 3])))
                edge_map.setdefault(key, []).append(fi)
        if any(len(v) > 2 for v in edge_map.values()):
            raise ValueError("mesh edge shared by more than two faces")
        self._edge_normal = {
            key: _unit(fn[adj].sum(axis=0)) for key, adj in edge_map.items()
        }

    def _feature_normal(self, face_idx, region):
        f = self.faces[face_idx]
        if region == REGION_FACE:
            return self.face_normals[face_idx]
        if region < 3:
            return self.vertex_normals[f[region]]
        pairs = ((0, 1), (1, 2), (2, 0))
        i, j = pairs[region - 3]
        return self._edge_normal[tuple(sorted((f[i], f[j])))]

    def query(self, points, with_grad=False):
        """Signed distances at query points; negative inside.

        with_grad additionally returns d(sdf)/d(point), the unit direction
        away from the nearest surface point (zero exactly on the surface).
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        sdf = np.empty(n)
        grad = np.zeros((n, 3))
        chunk = max(1, int(2e6 / max(len(self.faces), 1)))
        for start in range(0, n, chunk):
            pts = points[start:start + chunk]
            closest, region = closest_point_on_triangles(pts, self.tri)
            diff = pts[:, None, :] - closest
            d2 = np.einsum("pfk,pfk->pf", diff, diff)
            nearest = np.argmin(d2, axis=1)
            for i in range(len(pts)):
                fi = nearest[i]
                delta = diff[i, fi]
                dist = np.sqrt(d2[i, fi])
                normal = self._feature_normal(fi, int(region[i, fi]))
                sign = 1.0 if np.dot(delta, normal) >= 0 else -1.0
                gi = start + i
                sdf[gi] = sign * dist
                if with_grad and dist > 1e-12:
                    grad[gi] = sign * delta / dist
        if with_grad:
            return sdf, grad
        return sdf


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def sdf_query(point, vertices, faces):
    """One-off signed distance of a single point to a mesh."""
    return float(MeshSDF(vertices, faces).query(np.asarray(point)[None])[0])
