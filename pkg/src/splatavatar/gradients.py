"""Analytic backward pass through rasterize . project . repose.

The depth sort, culling, skip thresholds and early termination are treated
as constants of the paired forward pass; the backward kernel replays them.
Gradient accumulation is tile-sequential, so repeated backward passes over
the same forward state are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import quat_normalize, sh_basis, sh_basis_grad
from .rasterizer import ForwardContext, perspective_jacobians
from .scene import GaussianSet, IDENTITY_DIM
from .skinning import Reposed


class MissingForwardRecord(RuntimeError):
    """backward() called without a paired forward context."""


@dataclass
class RenderGrad:
    """Upstream d(loss)/d(RenderOutput); any channel may be None (= zeros)."""

    color: np.ndarray = None     # (H,W,3)
    alpha: np.ndarray = None     # (H,W)
    identity: np.ndarray = None  # (H,W,15)
    depth: np.ndarray = None     # (H,W)

    def filled(self, h, w):
        return (
            self.color if self.color is not None else np.zeros((h, w, 3)),
            self.alpha if self.alpha is not None else np.zeros((h, w)),
            self.identity if self.identity is not None else np.zeros((h, w, IDENTITY_DIM)),
            self.depth if self.depth is not None else np.zeros((h, w)),
        )


@dataclass
class ParamGradients:
    """Per-Gaussian gradients mirroring GaussianSet's optimizable fields."""

    d_offsets: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray
    d_opacity_logit: np.ndarray
    d_sh: np.ndarray
    d_identity: np.ndarray

    @staticmethod
    def zeros_like(g: GaussianSet):
        return ParamGradients(
            d_offsets=np.zeros_like(g.offsets),
            d_rotation=np.zeros_like(g.rotation),
            d_log_scale=np.zeros_like(g.log_scale),
            d_opacity_logit=np.zeros_like(g.opacity_logit),
            d_sh=np.zeros_like(g.sh),
            d_identity=np.zeros_like(g.identity),
        )

    def add_(self, other, weight=1.0):
        self.d_offsets += weight * other.d_offsets
        self.d_rotation += weight * other.d_rotation
        self.d_log_scale += weight * other.d_log_scale
        self.d_opacity_logit += weight * other.d_opacity_logit
        self.d_sh += weight * other.d_sh
        self.d_identity += weight * other.d_identity
        return self

    def zero_frozen_(self, g: GaussianSet):
        f = g.frozen
        self.d_offsets[f] = 0.0
        self.d_rotation[f] = 0.0
        self.d_log_scale[f] = 0.0
        self.d_opacity_logit[f] = 0.0
        self.d_sh[f] = 0.0
        self.d_identity[f] = 0.0
        return self

    def assert_finite(self):
        for name in ("d_offsets", "d_rotation", "d_log_scale",
                     "d_opacity_logit", "d_sh", "d_identity"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        return self


@dataclass
class SplatGrads:
    """Gradients with respect to screen-space splat attributes (kept splats)."""

    d_means2d: np.ndarray
    d_conic: np.ndarray      # packed [dA, d(2B), dC]
    d_opacity: np.ndarray    # post-sigmoid
    d_color: np.ndarray
    d_identity: np.ndarray
    d_depth: np.ndarray      # view-space depth channel


@dataclass
class WorldGrads:
    """Gradients with respect to world-space splat state (kept splats).

    The deformation field trains directly against these; the embedding
    chain continues in repose_backward.
    """

    keep_idx: np.ndarray
    d_positions: np.ndarray   # (M,3)
    d_rotations: np.ndarray   # (M,3,3) gradient wrt world rotation matrix
    d_scales: np.ndarray      # (M,3) gradient wrt world scale
    d_sh: np.ndarray          # (M,B,3)
    d_opacity: np.ndarray     # (M,) post-sigmoid
    d_identity: np.ndarray    # (M,15)


def rasterize_backward(ctx: ForwardContext, grad: RenderGrad) -> SplatGrads:
    if ctx is None:
        raise MissingForwardRecord("no forward context supplied")
    cam, cfg, splats = ctx.cam, ctx.cfg, ctx.splats
    h, w = cam.height, cam.width
    g_color, g_alpha, g_identity, g_depth = grad.filled(h, w)
    m = splats.means2d.shape[0]
    d_means2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opacity = np.zeros(m)
    d_color = np.zeros((m, 3))
    d_identity = np.zeros((m, IDENTITY_DIM))
    d_depth = np.zeros(m)
    _kernels.backward_kernel(
        ctx.binning.sorted_ids, ctx.binning.tile_starts, ctx.binning.tile_ends,
        splats.means2d, splats.conic, splats.opacity, splats.color,
        splats.identity, splats.depth,
        h, w, cfg.tile_size, ctx.binning.n_tiles_x,
        cfg.alpha_clamp, cfg.alpha_min,
        np.asarray(cfg.background_color, dtype=np.float64),
        cfg.background_identity(),
        ctx.n_contrib, ctx.final_t,
        np.ascontiguousarray(g_color), np.ascontiguousarray(g_identity),
        np.ascontiguousarray(g_depth), np.ascontiguousarray(g_alpha),
        d_means2d, d_conic, d_opacity, d_color, d_identity, d_depth)
    return SplatGrads(d_means2d, d_conic, d_opacity, d_color, d_identity,
                      d_depth)


def project_backward(ctx: ForwardContext, sg: SplatGrads, sh) -> WorldGrads:
    """Chain screen-space gradients to world position/rotation/scale/appearance.

    sh: the (N,B,3) SH coefficient array of the source set (for the color
    chain and its view-direction dependence).
    """
    splats = ctx.splats
    cam = ctx.cam
    m = splats.means2d.shape[0]
    b = sh.shape[1]
    rcw = cam.rotation

    # conic -> 2D covariance
    g_full = np.empty((m, 2, 2))
    g_full[:, 0, 0] = sg.d_conic[:, 0]
    g_full[:, 0, 1] = g_full[:, 1, 0] = 0.5 * sg.d_conic[:, 1]
    g_full[:, 1, 1] = sg.d_conic[:, 2]
    conic_mat = np.empty((m, 2, 2))
    conic_mat[:, 0, 0] = splats.conic[:, 0]
    conic_mat[:, 0, 1] = conic_mat[:, 1, 0] = splats.conic[:, 1]
    conic_mat[:, 1, 1] = splats.conic[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", conic_mat, g_full, conic_mat)

    # cov2d = J M J^T + lowpass*I; the lowpass term drops out of the chain
    p = splats.p_cam
    j = perspective_jacobians(p, cam.fx, cam.fy)
    m_cam = splats.cov_cam
    d_j = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov2d, j, m_cam)
    d_m = np.einsum("nji,njk,nkl->nil", j, d_cov2d, j)
    d_cov_world = np.einsum("ji,njk,kl->nil", rcw, d_m, rcw)

    d_p = np.zeros((m, 3))
    # mean2d chain (J is exactly d(mean2d)/dp)
    d_p += np.einsum("nji,nj->ni", j, sg.d_means2d)
    # J's own dependence on p
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = cam.fx, cam.fy
    d_p[:, 0] += d_j[:, 0, 2] * (-fx / z**2)
    d_p[:, 1] += d_j[:, 1, 2] * (-fy / z**2)
    d_p[:, 2] += (d_j[:, 0, 0] * (-fx / z**2)
                  + d_j[:, 1, 1] * (-fy / z**2)
                  + d_j[:, 0, 2] * (2.0 * fx * x / z**3)
                  + d_j[:, 1, 2] * (2.0 * fy * y / z**3))
    # depth channel
    d_p[:, 2] += sg.d_depth

    d_pos = d_p @ rcw

    # world covariance = R S^2 R^T
    rot = splats.rot_world
    s = splats.scale_world
    d_rot = 2.0 * np.einsum("nij,njk->nik", d_cov_world, rot * (s**2)[:, None, :])
    d_scale = 2.0 * s * np.einsum("nji,njk,nki->ni", rot, d_cov_world, rot)

    # SH color chain, including the view-direction dependence on position
    deg = splats.sh_degree
    basis = sh_basis(deg, splats.view_dir)               # (M,B)
    d_sh = basis[:, :, None] * sg.d_color[:, None, :]    # (M,B,3)
    if deg > 0:
        gb = sh_basis_grad(deg, splats.view_dir)         # (M,B,3)
        sh_kept = sh[splats.keep_idx]
        # dL/ddir = sum_c d_color_c * sum_b sh[b,c] * dbasis[b]/ddir
        d_dir = np.einsum("nc,nbc,nbd->nd", sg.d_color, sh_kept, gb)
        proj = (np.eye(3)[None] - splats.view_dir[:, :, None]
                * splats.view_dir[:, None, :]) / splats.view_vec_norm[:, None, None]
        d_pos += np.einsum("nij,nj->ni", proj, d_dir)

    return WorldGrads(
        keep_idx=splats.keep_idx, d_positions=d_pos, d_rotations=d_rot,
        d_scales=d_scale, d_sh=d_sh, d_opacity=sg.d_opacity,
        d_identity=sg.d_identity)


def quat_matrix_backward(q_raw, d_r):
    """Gradient through R(q/|q|) for raw quaternions q_raw (N,4), d_r (N,3,3)."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    dr = d_r

    def comb(m):
        # sum_ij d_r[n,i,j] * m[n,i,j]
        return np.einsum("nij,nij->n", dr, m)

    zeros = np.zeros(n)
    dw = 2.0 * comb(_stack3(zeros, -z, y, z, zeros, -x, -y, x, zeros))
    dx = 2.0 * comb(_stack3(zeros, y, z, y, -2 * x, -w, z, w, -2 * x))
    dy = 2.0 * comb(_stack3(-2 * y, x, w, x, zeros, z, -w, z, -2 * y))
    dz = 2.0 * comb(_stack3(-2 * z, -w, x, w, -2 * z, y, x, y, zeros))
    d_qhat = np.stack([dw, dx, dy, dz], axis=1)
    # normalization Jacobian (I - qq^T)/|q| (symmetric)
    d_q = (d_qhat - q * np.sum(q * d_qhat, axis=1, keepdims=True)) / norm
    return d_q


def _stack3(a00, a01, a02, a10, a11, a12, a20, a21, a22):
    row0 = np.stack([a00, a01, a02], axis=-1)
    row1 = np.stack([a10, a11, a12], axis=-1)
    row2 = np.stack([a20, a21, a22], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def repose_backward(gaussians: GaussianSet, reposed: Reposed,
                    wg: WorldGrads, respect_frozen=True) -> ParamGradients:
    """Chain world-space gradients into embedding-frame parameters."""
    out = ParamGradients.zeros_like(gaussians)
    idx = wg.keep_idx
    t = reposed.transport
    f = gaussians.face_index[idx]
    r = t.ratios[f]
    bp = t.bases_posed[f]
    # position = O_p + B_p (offsets * r)
    out.d_offsets[idx] = np.einsum("nji,nj->ni", bp, wg.d_positions) * r
    # world rotation = R_frame . R_local(q)
    rf = t.rotations[f]
    d_rloc = np.einsum("nji,njk->nik", rf, wg.d_rotations)
    out.d_rotation[idx] = quat_matrix_backward(gaussians.rotation[idx], d_rloc)
    # world scale = exp(log_scale) * r
    out.d_log_scale[idx] = wg.d_scales * reposed.scales[idx]
    # opacity = sigmoid(logit)
    op = gaussians.opacity[idx]
    out.d_opacity_logit[idx] = wg.d_opacity * op * (1.0 - op)
    out.d_sh[idx] = wg.d_sh
    out.d_identity[idx] = wg.d_identity
    if respect_frozen:
        out.zero_frozen_(gaussians)
    return out


def backward(gaussians: GaussianSet, reposed: Reposed, ctx: ForwardContext,
             grad: RenderGrad, respect_frozen=True) -> ParamGradients:
    """Full chain: upstream pixel gradients -> per-Gaussian parameter gradients."""
    if ctx is None:
        raise MissingForwardRecord("backward requires the forward context")
    sg = rasterize_backward(ctx, grad)
    wg = project_backward(ctx, sg, gaussians.sh)
    return repose_backward(gaussians, reposed, wg,
                           respect_frozen=respect_frozen).assert_finite()


# ---------------------------------------------------------------------------
# parameter flattening (for finite-difference checks and the optimizer)
# ---------------------------------------------------------------------------

PARAM_GROUPS = ("offsets", "rotation", "log_scale", "opacity_logit", "sh",
                "identity")
GRAD_FIELDS = {"offsets": "d_offsets", "rotation": "d_rotation",
               "log_scale": "d_log_scale", "opacity_logit": "d_opacity_logit",
               "sh": "d_sh", "identity": "d_identity"}


def param_vector(g: GaussianSet):
    """Flatten the optimizable (non-frozen) parameters into one vector."""
    free = ~g.frozen
    return np.concatenate([getattr(g, name)[free].ravel()
                           for name in PARAM_GROUPS])


def set_param_vector(g: GaussianSet, vec):
    free = ~g.frozen
    pos = 0
    for name in PARAM_GROUPS:
        arr = getattr(g, name)
        block = arr[free]
        nel = block.size
        arr[free] = vec[pos:pos + nel].reshape(block.shape)
        pos += nel
    assert pos == vec.size


def grad_vector(g: GaussianSet, grads: ParamGradients):
    free = ~g.frozen
    return np.concatenate([getattr(grads, GRAD_FIELDS[name])[free].ravel()
                           for name in PARAM_GROUPS])


def check_gradients(gaussians, mesh, views, weights, loss_id,
                    n_coords=200, seed=0, h=1e-5):
    """Compare analytic gradients against central finite differences.

    Returns {"max_rel_err", "worst_coord", "n_checked"}.  Relative error
    uses max(|a|, |b|, 1e-8) as denominator; if both analytic and numeric
    gradients vanish everywhere the error is 0 by convention.

    The step h=1e-5 balances truncation against two hazards: larger steps
    cross the L1 kink on well-fit pixels, smaller ones drown in roundoff.
    """
    from .losses import total_loss_and_grads  # local import, avoids a cycle

    work = gaussians.copy()
    base_vec = param_vector(work)
    _, grads = total_loss_and_grads(work, mesh, views, weights, loss_id,
                                    seed=seed)
    analytic = grad_vector(work, grads)

    rng = np.random.default_rng(seed)
    n = base_vec.size
    coords = rng.choice(n, size=min(n_coords, n), replace=False)

    def value_at(vec):
        set_param_vector(work, vec)
        v, _ = total_loss_and_grads(work, mesh, views, weights, loss_id,
                                    seed=seed, need_grads=False)
        return v

    max_rel = 0.0
    worst = -1
    for c in coords:
        vec = base_vec.copy()
        vec[c] = base_vec[c] + h
        fp = value_at(vec)
        vec[c] = base_vec[c] - h
        fm = value_at(vec)
        num = (fp - fm) / (2.0 * h)
        a = analytic[c]
        rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
        if rel > max_rel:
            max_rel = rel
            worst = int(c)
    set_param_vector(work, base_vec)
    return {"max_rel_err": max_rel, "worst_coord": worst,
            "n_checked": len(coords)}
