"""Tile-based forward splatting: color, alpha, identity feature, depth.

project() maps world-space Gaussians to screen-space splats with the
perspective-affine covariance approximation; rasterize() blends them
front-to-back per pixel.  rasterize_brute() is an independent per-pixel
evaluator (no tiling, global sort) used as the rasterizer's oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import eval_sh, sh_basis
from .scene import Camera, GaussianSet, IDENTITY_DIM
from .skinning import Reposed

# Bounding radius in units of the footprint's largest standard deviation.
# 3.5 sigma guarantees every contribution above the 1/255 skip threshold
# lands inside the bounding box (alpha <= 0.99 implies the threshold ellipse
# is within 3.33 sigma).
RADIUS_SIGMAS = 3.5


@dataclass
class RasterConfig:
    tile_size: int = 16
    lowpass: float = 0.3            # px^2 added to the 2D covariance diagonal
    alpha_clamp: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    background_color: np.ndarray = field(
        default_factory=lambda: np.zeros(3))
    background_identity_magnitude: float = 1.0

    def background_identity(self):
        bg = np.zeros(IDENTITY_DIM)
        bg[0] = self.background_identity_magnitude
        return bg


@dataclass
class RenderOutput:
    color: np.ndarray      # (H,W,3)
    alpha: np.ndarray      # (H,W)
    identity: np.ndarray   # (H,W,15)
    depth: np.ndarray      # (H,W)


@dataclass
class ProjectedSplats:
    """Screen-space splats plus the intermediates the backward pass needs.

    Arrays are over the M kept (non-culled) splats; keep_idx maps back to
    the source Gaussian index.
    """

    keep_idx: np.ndarray    # (M,)
    p_cam: np.ndarray       # (M,3) camera-space positions
    means2d: np.ndarray     # (M,2)
    cov2d: np.ndarray       # (M,2,2) after low-pass
    conic: np.ndarray       # (M,3) packed inverse [A,B,C]
    depth: np.ndarray       # (M,)
    color: np.ndarray       # (M,3)
    opacity: np.ndarray     # (M,)
    identity: np.ndarray    # (M,15)
    radius: np.ndarray      # (M,) pixel bounding radius
    view_dir: np.ndarray    # (M,3) unit camera-to-splat directions
    view_vec_norm: np.ndarray  # (M,)
    sh_degree: int
    cov_cam: np.ndarray = None     # (M,3,3) camera-frame world covariance
    rot_world: np.ndarray = None   # (M,3,3)
    scale_world: np.ndarray = None  # (M,3)


def perspective_jacobians(p_cam, fx, fy):
    """(M,2,3) Jacobians of (fx x/z, fy y/z) at camera-space points."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    m = p_cam.shape[0]
    j = np.zeros((m, 2, 3))
    j[:, 0, 0] = fx / z
    j[:, 0, 2] = -fx * x / z**2
    j[:, 1, 1] = fy / z
    j[:, 1, 2] = -fy * y / z**2
    return j


def project(reposed: Reposed, opacity, sh, identity, cam: Camera,
            cfg: RasterConfig = None, sh_degree=None):
    """Project world Gaussians into screen space, culling as needed.

    opacity (N,), sh (N,B,3), identity (N,15) are the appearance attributes
    of the reposed Gaussians.
    """
    if cfg is None:
        cfg = RasterConfig()
    if sh_degree is None:
        sh_degree = int(round(np.sqrt(sh.shape[1]))) - 1
    pos = reposed.positions
    n = pos.shape[0]
    rcw = cam.rotation
    p_cam = pos @ rcw.T + cam.translation
    in_front = p_cam[:, 2] > cam.near

    idx = np.nonzero(in_front)[0]
    p = p_cam[idx]
    z = p[:, 2]
    means2d = np.stack([cam.fx * p[:, 0] / z + cam.cx,
                        cam.fy * p[:, 1] / z + cam.cy], axis=1)

    rot = reposed.rotations[idx]
    s = reposed.scales[idx]
    # world covariance R diag(s^2) R^T, then into camera space
    rs = rot * s[:, None, :]
    cov_w = np.einsum("nij,nkj->nik", rs, rs)
    m_cam = np.einsum("ij,njk,lk->nil", rcw, cov_w, rcw)
    j = perspective_jacobians(p, cam.fx, cam.fy)
    cov2d = np.einsum("nij,njk,nlk->nil", j, m_cam, j)
    cov2d[:, 0, 0] += cfg.lowpass
    cov2d[:, 1, 1] += cfg.lowpass

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    trace = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    lam_max = 0.5 * trace + np.sqrt(np.maximum(0.25 * trace**2 - det, 0.0))
    radius = RADIUS_SIGMAS * np.sqrt(lam_max)

    on_image = ((means2d[:, 0] + radius > 0) & (means2d[:, 0] - radius < cam.width)
                & (means2d[:, 1] + radius > 0) & (means2d[:, 1] - radius < cam.height))
    idx = idx[on_image]
    p = p[on_image]
    means2d = means2d[on_image]
    cov2d = cov2d[on_image]
    det = det[on_image]
    radius = radius[on_image]
    m_cam = m_cam[on_image]
    rot = rot[on_image]
    s = s[on_image]

    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det,
                      cov2d[:, 0, 0] / det], axis=1)

    vec = reposed.positions[idx] - cam.center
    vec_norm = np.linalg.norm(vec, axis=1)
    view_dir = vec / vec_norm[:, None]
    color = eval_sh(sh[idx], view_dir, degree=sh_degree)

    return ProjectedSplats(
        keep_idx=idx, p_cam=p, means2d=means2d, cov2d=cov2d, conic=conic,
        depth=p[:, 2].copy(), color=color, opacity=np.asarray(opacity)[idx],
        identity=np.asarray(identity)[idx], radius=radius,
        view_dir=view_dir, view_vec_norm=vec_norm, sh_degree=sh_degree,
        cov_cam=m_cam, rot_world=rot, scale_world=s)


@dataclass
class TileBinning:
    sorted_ids: np.ndarray
    tile_starts: np.ndarray
    tile_ends: np.ndarray
    n_tiles_x: int
    n_tiles_y: int


def bin_splats(splats: ProjectedSplats, cam: Camera, cfg: RasterConfig):
    """Assign splats to the tiles their bounding boxes touch, sorted per tile
    by (view depth, source index)."""
    ts = cfg.tile_size
    ntx = (cam.width + ts - 1) // ts
    nty = (cam.height + ts - 1) // ts
    m = splats.means2d.shape[0]
    if m == 0:
        empty = np.zeros(0, dtype=np.int64)
        z = np.zeros(ntx * nty, dtype=np.int64)
        return TileBinning(empty, z, z.copy(), ntx, nty)
    x0 = np.clip(((splats.means2d[:, 0] - splats.radius) // ts).astype(np.int64), 0, ntx - 1)
    x1 = np.clip(((splats.means2d[:, 0] + splats.radius) // ts).astype(np.int64), 0, ntx - 1)
    y0 = np.clip(((splats.means2d[:, 1] - splats.radius) // ts).astype(np.int64), 0, nty - 1)
    y1 = np.clip(((splats.means2d[:, 1] + splats.radius) // ts).astype(np.int64), 0, nty - 1)
    counts = (x1 - x0 + 1) * (y1 - y0 + 1)
    total = int(counts.sum())
    pair_tile = np.empty(total, dtype=np.int64)
    pair_splat = np.empty(total, dtype=np.int64)
    pos = 0
    for i in range(m):
        for ty in range(y0[i], y1[i] + 1):
            base = ty * ntx
            nx = x1[i] - x0[i] + 1
            pair_tile[pos:pos + nx] = base + np.arange(x0[i], x1[i] + 1)
            pair_splat[pos:pos + nx] = i
            pos += nx
    # sort by tile, then depth, then source index (stable tiebreak)
    src = splats.keep_idx[pair_splat]
    order = np.lexsort((src, splats.depth[pair_splat], pair_tile))
    pair_tile = pair_tile[order]
    pair_splat = pair_splat[order]
    tile_starts = np.searchsorted(pair_tile, np.arange(ntx * nty))
    tile_ends = np.searchsorted(pair_tile, np.arange(ntx * nty), side="right")
    return TileBinning(pair_splat, tile_starts.astype(np.int64),
                       tile_ends.astype(np.int64), ntx, nty)


@dataclass
class ForwardContext:
    """Everything a paired backward pass needs from the forward pass."""

    cam: Camera
    cfg: RasterConfig
    splats: ProjectedSplats
    binning: TileBinning
    n_contrib: np.ndarray
    final_t: np.ndarray
    output: RenderOutput


def rasterize(splats: ProjectedSplats, cam: Camera, cfg: RasterConfig = None):
    """Tiled front-to-back blend.  Returns (RenderOutput, ForwardContext)."""
    if cfg is None:
        cfg = RasterConfig()
    h, w = cam.height, cam.width
    binning = bin_splats(splats, cam, cfg)
    out_color = np.zeros((h, w, 3))
    out_identity = np.zeros((h, w, IDENTITY_DIM))
    out_depth = np.zeros((h, w))
    out_alpha = np.zeros((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int64)
    final_t = np.ones((h, w))
    _kernels.forward_kernel(
        binning.sorted_ids, binning.tile_starts, binning.tile_ends,
        splats.means2d, splats.conic, splats.opacity, splats.color,
        splats.identity, splats.depth,
        h, w, cfg.tile_size, binning.n_tiles_x,
        cfg.alpha_clamp, cfg.alpha_min, cfg.t_min,
        np.asarray(cfg.background_color, dtype=np.float64),
        cfg.background_identity(),
        out_color, out_identity, out_depth, out_alpha, n_contrib, final_t)
    output = RenderOutput(out_color, out_alpha, out_identity, out_depth)
    ctx = ForwardContext(cam, cfg, splats, binning, n_contrib, final_t, output)
    return output, ctx


def rasterize_brute(splats: ProjectedSplats, cam: Camera, cfg: RasterConfig = None):
    """Independent dense evaluator: global (depth, source) sort, no tiling.

    Every splat is evaluated at every pixel as one (pixels, splats) array;
    shares only the skip thresholds with the tiled path.  Used as its oracle.
    """
    if cfg is None:
        cfg = RasterConfig()
    h, w = cam.height, cam.width
    order = np.lexsort((splats.keep_idx, splats.depth))
    bg_c = np.asarray(cfg.background_color, dtype=np.float64)
    bg_id = cfg.background_identity()

    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.reshape(-1, 1) + 0.5
    py = ys.reshape(-1, 1) + 0.5
    dx = px - splats.means2d[order, 0]            # (P, N)
    dy = py - splats.means2d[order, 1]
    q = (splats.conic[order, 0] * dx * dx
         + 2.0 * splats.conic[order, 1] * dx * dy
         + splats.conic[order, 2] * dy * dy)
    a = np.minimum(cfg.alpha_clamp, splats.opacity[order] * np.exp(-0.5 * q))
    a[(q < 0.0) | (a < cfg.alpha_min)] = 0.0

    # transmittance after each splat; skipped splats contribute factor 1.
    # t_after is non-increasing along the sorted axis, so "stop once the
    # next blend would drop it below t_min" is exactly "drop every splat
    # whose t_after is below t_min".
    t_after = np.cumprod(1.0 - a, axis=1)
    a[t_after < cfg.t_min] = 0.0
    t_after = np.cumprod(1.0 - a, axis=1)
    t_before = np.empty_like(t_after)
    t_before[:, 0] = 1.0
    t_before[:, 1:] = t_after[:, :-1]
    weight = a * t_before                          # (P, N)

    t_final = t_after[:, -1] if a.shape[1] else np.ones(h * w)
    color = (weight @ splats.color[order]
             + t_final[:, None] * bg_c).reshape(h, w, 3)
    identity = (weight @ splats.identity[order]
                + t_final[:, None] * bg_id).reshape(h, w, IDENTITY_DIM)
    depth = (weight @ splats.depth[order]).reshape(h, w)
    alpha = (1.0 - t_final).reshape(h, w)
    return RenderOutput(color, alpha, identity, depth)


def render(gaussians: GaussianSet, reposed: Reposed, cam: Camera,
           cfg: RasterConfig = None):
    """Convenience: project + rasterize a Gaussian set given its reposed state."""
    splats = project(reposed, gaussians.opacity, gaussians.sh,
                     gaussians.identity, cam, cfg)
    return rasterize(splats, cam, cfg)


def splat_max_weights(ctx: ForwardContext, pixel_mask, n_sources=None):
    """Per-source-Gaussian maximum pixel blend weight within a pixel mask.

    Returns an array over the full source set (culled splats get 0).
    """
    splats = ctx.splats
    m = splats.means2d.shape[0]
    max_w = np.zeros(m)
    _kernels.splat_weight_kernel(
        ctx.binning.sorted_ids, ctx.binning.tile_starts, ctx.binning.tile_ends,
        splats.means2d, splats.conic, splats.opacity,
        ctx.cam.height, ctx.cam.width, ctx.cfg.tile_size, ctx.binning.n_tiles_x,
        ctx.cfg.alpha_clamp, ctx.cfg.alpha_min, ctx.cfg.t_min,
        np.ascontiguousarray(pixel_mask, dtype=np.bool_), max_w)
    if n_sources is None:
        n_sources = int(splats.keep_idx.max()) + 1 if m else 0
    out = np.zeros(n_sources)
    out[splats.keep_idx] = max_w
    return out
