"""Training objectives: reconstruction, identity (2D CE + 3D KL), anisotropy,
SDF exteriority, and reference-frame MSE.

Every loss returns its scalar value and, where meaningful, the gradient with
respect to its immediate input; total_loss_and_grads composes them into
per-Gaussian parameter gradients for the gradient checker and the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .rasterizer import RenderOutput
from .scene import GaussianSet, IDENTITY_DIM, LAYER_ASSET, SkinnedMesh
from .sdf import MeshSDF
from .skinning import repose


class DimensionMismatch(ValueError):
    pass


class TooFewGaussians(ValueError):
    pass


@dataclass
class LossWeights:
    w_ori: float = 1.0
    w_id2d: float = 1.0
    w_id3d: float = 1.0
    w_ani: float = 1.0
    w_sdf: float = 1.0
    w_ref: float = 1.0
    lambda_ssim: float = 0.2
    tau: float = 4.0
    knn_k: int = 5
    knn_m: int = 1000
    sdf_margin: float = 0.0

    def __post_init__(self):
        if self.tau < 1.0:
            raise ValueError("tau must be >= 1")
        if self.knn_k < 1 or self.knn_m < 1:
            raise ValueError("knn_k and knn_m must be >= 1")


@dataclass
class TrainingView:
    cam: object
    image: np.ndarray          # (H,W,3) in [0,1]
    mask: np.ndarray = None    # (H,W) int labels 0..14


def validate_mask(mask):
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= IDENTITY_DIM:
        raise ValueError("mask labels outside 0..14")
    return mask.astype(np.int64)


# ---------------------------------------------------------------------------
# SSIM (11x11 gaussian window, sigma 1.5, valid-region crop)
# ---------------------------------------------------------------------------

_SSIM_WIN = 11
_SSIM_PAD = _SSIM_WIN // 2
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _ssim_kernel():
    r = np.arange(_SSIM_WIN) - _SSIM_PAD
    g = np.exp(-0.5 * (r / 1.5) ** 2)
    return g / g.sum()


_KERNEL = _ssim_kernel()


def _fvalid(img):
    """Separable gaussian correlation, cropped to the valid region."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[_SSIM_PAD:-_SSIM_PAD, _SSIM_PAD:-_SSIM_PAD]


def _fadjoint(grad_map, h, w):
    """Adjoint of _fvalid: scatter a valid-region map back to full size."""
    full = np.zeros((h, w))
    full[_SSIM_PAD:-_SSIM_PAD, _SSIM_PAD:-_SSIM_PAD] = grad_map
    out = correlate1d(full, _KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out


def ssim(x, y, with_grad=False):
    """Mean SSIM between two images (channels averaged); optional d(ssim)/dx.

    Matches the standard gaussian-weighted formulation (population
    covariances, borders cropped), so independent reference implementations
    agree to float precision.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    h, w, nc = x.shape
    if h < _SSIM_WIN or w < _SSIM_WIN:
        raise DimensionMismatch("image smaller than the SSIM window")
    total = 0.0
    grad = np.zeros_like(x) if with_grad else None
    npix = (h - 2 * _SSIM_PAD) * (w - 2 * _SSIM_PAD)
    for c in range(nc):
        xc, yc = x[:, :, c], y[:, :, c]
        mux = _fvalid(xc)
        muy = _fvalid(yc)
        sxx = _fvalid(xc * xc) - mux * mux
        syy = _fvalid(yc * yc) - muy * muy
        sxy = _fvalid(xc * yc) - mux * muy
        a1 = 2.0 * mux * muy + _SSIM_C1
        a2 = 2.0 * sxy + _SSIM_C2
        b1 = mux * mux + muy * muy + _SSIM_C1
        b2 = sxx + syy + _SSIM_C2
        smap = (a1 * a2) / (b1 * b2)
        total += smap.mean()
        if with_grad:
            # partials of the per-pixel SSIM value
            d_a1 = a2 / (b1 * b2)
            d_a2 = a1 / (b1 * b2)
            d_b1 = -smap / b1
            d_b2 = -smap / b2
            g_mux = 2.0 * muy * d_a1 + 2.0 * mux * d_b1
            g_sxx = d_b2
            g_sxy = 2.0 * d_a2
            scale = 1.0 / (npix * nc)
            gm = (g_mux - 2.0 * mux * g_sxx - muy * g_sxy) * scale
            gs2 = g_sxx * scale
            gsxy = g_sxy * scale
            grad[:, :, c] = (_fadjoint(gm, h, w)
                             + 2.0 * xc * _fadjoint(gs2, h, w)
                             + yc * _fadjoint(gsxy, h, w))
    value = total / nc
    if with_grad:
        return value, grad
    return value


# ---------------------------------------------------------------------------
# individual losses
# ---------------------------------------------------------------------------

def image_loss_ori(color, target, lambda_ssim=0.2, with_grad=True):
    """(1-lambda)*L1 + lambda*(1-SSIM) on [0,1] color images."""
    color = np.asarray(color, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if color.shape != target.shape:
        raise DimensionMismatch(f"{color.shape} vs {target.shape}")
    diff = color - target
    l1 = np.abs(diff).mean()
    if lambda_ssim == 0.0:
        value = l1
        if not with_grad:
            return value, None
        grad = np.sign(diff) / diff.size
        return value, grad
    if with_grad:
        s, ds = ssim(color, target, with_grad=True)
    else:
        s, ds = ssim(color, target), None
    value = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
    if not with_grad:
        return value, None
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size - lambda_ssim * ds
    return value, grad


def identity_ce(identity_feature, mask, with_grad=True):
    """Mean pixel cross-entropy of softmax(identity feature) against labels."""
    feat = np.asarray(identity_feature, dtype=np.float64)
    mask = validate_mask(mask)
    h, w, k = feat.shape
    if mask.shape != (h, w):
        raise DimensionMismatch(f"mask {mask.shape} vs feature {(h, w)}")
    m = feat.max(axis=2, keepdims=True)
    e = np.exp(feat - m)
    z = e.sum(axis=2, keepdims=True)
    logp = feat - m - np.log(z)
    rows, cols = np.indices((h, w))
    value = -logp[rows, cols, mask].mean()
    if not with_grad:
        return value, None
    p = e / z
    grad = p.copy()
    grad[rows, cols, mask] -= 1.0
    grad /= h * w
    return value, grad


def identity_knn_kl(identity, positions, k, m, seed, with_grad=True):
    """Mean KL between each sampled Gaussian's softmax encoding and those of
    its k nearest spatial neighbors."""
    identity = np.asarray(identity, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    n = identity.shape[0]
    if n < k + 1:
        raise TooFewGaussians(f"need at least {k + 1} Gaussians, have {n}")
    rng = np.random.default_rng(seed)
    m_eff = min(m, n)
    sample = rng.choice(n, size=m_eff, replace=False)
    tree = cKDTree(positions)
    _, nbr = tree.query(positions[sample], k=k + 1)
    nbr = np.atleast_2d(nbr)
    # drop self (first column when present, else the farthest)
    neigh = np.empty((m_eff, k), dtype=np.int64)
    for row in range(m_eff):
        cand = [j for j in nbr[row] if j != sample[row]]
        neigh[row] = cand[:k]

    def softmax(a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    p = softmax(identity[sample])          # (m,15)
    q = softmax(identity[neigh])           # (m,k,15)
    ratio = np.log(p[:, None, :] / q)
    value = (p[:, None, :] * ratio).sum(axis=2).sum() / (m_eff * k)
    if not with_grad:
        return value, None
    grad = np.zeros_like(identity)
    scale = 1.0 / (m_eff * k)
    # P-side: for each neighbor term, grad_e = P*(v - sum(P*v)), v = log(P/Q)
    v = ratio                               # (m,k,15)
    pv = (p[:, None, :] * v).sum(axis=2, keepdims=True)
    gp = (p[:, None, :] * (v - pv)).sum(axis=1) * scale
    np.add.at(grad, sample, gp)
    # Q-side: grad_e' = Q - P
    gq = (q - p[:, None, :]) * scale
    np.add.at(grad, neigh.ravel(), gq.reshape(-1, identity.shape[1]))
    return value, grad


def anisotropy(log_scale, tau, with_grad=True):
    """Mean hinge on the major/minor axis ratio above tau."""
    ls = np.asarray(log_scale, dtype=np.float64)
    n = ls.shape[0]
    if n == 0:
        return 0.0, (np.zeros_like(ls) if with_grad else None)
    hi = ls.argmax(axis=1)
    lo = ls.argmin(axis=1)
    ratio = np.exp(ls[np.arange(n), hi] - ls[np.arange(n), lo])
    value = np.maximum(ratio, tau).mean() - tau
    if not with_grad:
        return value, None
    grad = np.zeros_like(ls)
    active = ratio > tau
    grad[np.arange(n)[active], hi[active]] += ratio[active] / n
    grad[np.arange(n)[active], lo[active]] -= ratio[active] / n
    return value, grad


def sdf_exterior(positions, mesh_sdf: MeshSDF, margin=0.0, with_grad=True):
    """Mean squared hinge penalizing positions inside the mesh (sdf < margin)."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n == 0:
        return 0.0, (np.zeros_like(positions) if with_grad else None)
    if with_grad:
        s, gs = mesh_sdf.query(positions, with_grad=True)
    else:
        s, gs = mesh_sdf.query(positions), None
    hinge = np.maximum(0.0, -s + margin)
    value = (hinge ** 2).mean()
    if not with_grad:
        return value, None
    grad = (2.0 * hinge / n)[:, None] * (-gs)
    return value, grad


def frames_mse(frames, refs, with_grad=True):
    """Mean over frames of the per-frame mean squared pixel error."""
    frames = np.asarray(frames, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if frames.shape != refs.shape:
        raise DimensionMismatch(f"{frames.shape} vs {refs.shape}")
    diff = frames - refs
    value = (diff ** 2).mean()
    if not with_grad:
        return value, None
    return value, 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# spec-facing wrappers operating on RenderOutput / scene objects
# ---------------------------------------------------------------------------

def loss_ori(rendered: RenderOutput, target, lambda_ssim=0.2):
    return image_loss_ori(rendered.color, target, lambda_ssim,
                          with_grad=False)[0]


def loss_id2d(identity_feature, mask):
    return identity_ce(identity_feature, mask, with_grad=False)[0]


def loss_id3d(gaussians: GaussianSet, mesh: SkinnedMesh, k, m, seed):
    asset = gaussians.layer == LAYER_ASSET
    if asset.sum() < k + 1:
        raise TooFewGaussians("asset count must exceed k")
    reposed = repose(gaussians, mesh)
    return identity_knn_kl(gaussians.identity[asset],
                           reposed.positions[asset], k, m, seed,
                           with_grad=False)[0]


def loss_ani(gaussians: GaussianSet, tau):
    asset = gaussians.layer == LAYER_ASSET
    return anisotropy(gaussians.log_scale[asset], tau, with_grad=False)[0]


def loss_sdf(gaussians: GaussianSet, mesh: SkinnedMesh, posed_vertices=None,
             margin=0.0):
    asset = gaussians.layer == LAYER_ASSET
    reposed = repose(gaussians, mesh, posed_vertices)
    verts = mesh.vertices if posed_vertices is None else posed_vertices
    msdf = MeshSDF(verts, mesh.faces)
    return sdf_exterior(reposed.positions[asset], msdf, margin,
                        with_grad=False)[0]


def loss_ref(rendered_frames, video_frames):
    return frames_mse(rendered_frames, video_frames, with_grad=False)[0]


def sdf_query(point, mesh: SkinnedMesh, posed_vertices=None):
    verts = mesh.vertices if posed_vertices is None else posed_vertices
    return float(MeshSDF(verts, mesh.faces).query(
        np.asarray(point, dtype=np.float64)[None])[0])


# ---------------------------------------------------------------------------
# composition for gradient checking and training
# ---------------------------------------------------------------------------

LOSS_IDS = ("ori", "l1", "id2d", "id3d", "ani", "sdf", "ref")


def total_loss_and_grads(gaussians: GaussianSet, mesh: SkinnedMesh, views,
                         weights: LossWeights, loss_id, seed=0,
                         need_grads=True, raster_cfg=None):
    """One named loss over a scene, with parameter gradients.

    Image losses are averaged over the supplied views.  Used by the
    gradient checker; the trainer composes the per-loss pieces directly.
    """
    from .gradients import ParamGradients, RenderGrad, backward
    from .rasterizer import render

    if loss_id not in LOSS_IDS:
        raise ValueError(f"unknown loss '{loss_id}'; expected one of {LOSS_IDS}")
    grads = ParamGradients.zeros_like(gaussians) if need_grads else None
    asset = gaussians.layer == LAYER_ASSET

    if loss_id in ("ori", "l1", "id2d", "ref"):
        total = 0.0
        nv = len(views)
        for view in views:
            out, ctx = render(gaussians, repose(gaussians, mesh), view.cam,
                              raster_cfg)
            if loss_id in ("ori", "l1"):
                lam = 0.0 if loss_id == "l1" else weights.lambda_ssim
                v, g = image_loss_ori(out.color, view.image, lam,
                                      with_grad=need_grads)
                up = RenderGrad(color=None if g is None else g / nv)
            elif loss_id == "id2d":
                v, g = identity_ce(out.identity, view.mask,
                                   with_grad=need_grads)
                up = RenderGrad(identity=None if g is None else g / nv)
            else:
                v, g = frames_mse(out.color, view.image, with_grad=need_grads)
                up = RenderGrad(color=None if g is None else g / nv)
            total += v / nv
            if need_grads:
                grads.add_(backward(gaussians, repose(gaussians, mesh), ctx, up))
        return total, grads

    if loss_id == "ani":
        v, g = anisotropy(gaussians.log_scale[asset], weights.tau,
                          with_grad=need_grads)
        if need_grads:
            grads.d_log_scale[asset] = g
            grads.zero_frozen_(gaussians)
        return v, grads

    if loss_id == "id3d":
        reposed = repose(gaussians, mesh)
        if asset.sum() < weights.knn_k + 1:
            raise TooFewGaussians("asset count must exceed knn_k")
        v, g = identity_knn_kl(gaussians.identity[asset],
                               reposed.positions[asset],
                               weights.knn_k, weights.knn_m, seed,
                               with_grad=need_grads)
        if need_grads:
            grads.d_identity[asset] = g
            grads.zero_frozen_(gaussians)
        return v, grads

    # sdf
    reposed = repose(gaussians, mesh)
    msdf = MeshSDF(mesh.vertices, mesh.faces)
    v, g = sdf_exterior(reposed.positions[asset], msdf, weights.sdf_margin,
                        with_grad=need_grads)
    if need_grads:
        t = reposed.transport
        f = gaussians.face_index[asset]
        d_off = np.einsum("nji,nj->ni", t.bases_posed[f], g) * t.ratios[f]
        grads.d_offsets[asset] = d_off
        grads.zero_frozen_(gaussians)
    return v, grads
