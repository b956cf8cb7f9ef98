"""Numba kernels for the tile-based splat rasterizer (forward and backward).

Tiles never write overlapping pixels and are processed in a fixed order, so
outputs and gradient accumulations are deterministic.  Everything runs in
float64; the backward kernel replays the forward traversal decisions
(skip thresholds, early termination) exactly.
"""

import numba
import numpy as np

F8 = numba.float64


@numba.njit(cache=True)
def forward_kernel(sorted_ids, tile_starts, tile_ends,
                   means2d, conic, opacity, color, identity, depth,
                   height, width, tile_size, n_tiles_x,
                   alpha_clamp, alpha_min, t_min,
                   bg_color, bg_identity,
                   out_color, out_identity, out_depth, out_alpha,
                   n_contrib, final_t):
    n_tiles = tile_starts.shape[0]
    id_dim = identity.shape[1]
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        start = tile_starts[tile]
        end = tile_ends[tile]
        for py in range(y0, y1):
            for px in range(x0, x1):
                cx = px + 0.5
                cy = py + 0.5
                t = 1.0
                contrib = 0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                acc_id = np.zeros(id_dim, dtype=np.float64)
                for s in range(start, end):
                    g = sorted_ids[s]
                    dx = cx - means2d[g, 0]
                    dy = cy - means2d[g, 1]
                    q = (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                         + conic[g, 2] * dy * dy)
                    if q < 0.0:
                        continue
                    a = opacity[g] * np.exp(-0.5 * q)
                    if a > alpha_clamp:
                        a = alpha_clamp
                    if a < alpha_min:
                        continue
                    next_t = t * (1.0 - a)
                    if next_t < t_min:
                        break
                    w = a * t
                    acc_r += w * color[g, 0]
                    acc_g += w * color[g, 1]
                    acc_b += w * color[g, 2]
                    acc_d += w * depth[g]
                    for c in range(id_dim):
                        acc_id[c] += w * identity[g, c]
                    t = next_t
                    contrib = s - start + 1
                out_color[py, px, 0] = acc_r + t * bg_color[0]
                out_color[py, px, 1] = acc_g + t * bg_color[1]
                out_color[py, px, 2] = acc_b + t * bg_color[2]
                out_depth[py, px] = acc_d
                for c in range(id_dim):
                    out_identity[py, px, c] = acc_id[c] + t * bg_identity[c]
                out_alpha[py, px] = 1.0 - t
                n_contrib[py, px] = contrib
                final_t[py, px] = t


@numba.njit(cache=True)
def backward_kernel(sorted_ids, tile_starts, tile_ends,
                    means2d, conic, opacity, color, identity, depth,
                    height, width, tile_size, n_tiles_x,
                    alpha_clamp, alpha_min,
                    bg_color, bg_identity,
                    n_contrib, final_t,
                    g_color, g_identity, g_depth, g_alpha,
                    d_means2d, d_conic, d_opacity, d_color, d_identity,
                    d_depth):
    n_tiles = tile_starts.shape[0]
    id_dim = identity.shape[1]
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        start = tile_starts[tile]
        for py in range(y0, y1):
            for px in range(x0, x1):
                contrib = n_contrib[py, px]
                if contrib == 0 and g_alpha[py, px] == 0.0:
                    # No contributors: only the background/alpha terms depend
                    # on splats, and with zero contributors nothing does.
                    continue
                cx = px + 0.5
                cy = py + 0.5
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_depth[py, px]
                ga = g_alpha[py, px]
                # payload carried by the residual transmittance T_final
                bgpay = (bg_color[0] * gc0 + bg_color[1] * gc1
                         + bg_color[2] * gc2) - ga
                for c in range(id_dim):
                    bgpay += bg_identity[c] * g_identity[py, px, c]
                t_after = final_t[py, px]
                acc = t_after * bgpay  # sum of w_j*phi_j for j > i, plus T_F payload
                for s in range(start + contrib - 1, start - 1, -1):
                    g = sorted_ids[s]
                    dx = cx - means2d[g, 0]
                    dy = cy - means2d[g, 1]
                    q = (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                         + conic[g, 2] * dy * dy)
                    if q < 0.0:
                        continue
                    raw = opacity[g] * np.exp(-0.5 * q)
                    clamped = raw > alpha_clamp
                    a = alpha_clamp if clamped else raw
                    if a < alpha_min:
                        continue
                    t_before = t_after / (1.0 - a)
                    w = a * t_before
                    phi = (color[g, 0] * gc0 + color[g, 1] * gc1
                           + color[g, 2] * gc2 + depth[g] * gd)
                    for c in range(id_dim):
                        phi += identity[g, c] * g_identity[py, px, c]
                    # payload gradients
                    d_color[g, 0] += w * gc0
                    d_color[g, 1] += w * gc1
                    d_color[g, 2] += w * gc2
                    d_depth[g] += w * gd
                    for c in range(id_dim):
                        d_identity[g, c] += w * g_identity[py, px, c]
                    # dL/d alpha'
                    da = t_before * phi - acc / (1.0 - a)
                    acc += w * phi
                    t_after = t_before
                    if clamped:
                        continue
                    # alpha' = opacity * exp(-q/2)
                    expq = a / opacity[g]
                    d_opacity[g] += da * expq
                    dq = da * a * (-0.5)
                    d_conic[g, 0] += dq * dx * dx
                    d_conic[g, 1] += dq * 2.0 * dx * dy
                    d_conic[g, 2] += dq * dy * dy
                    d_means2d[g, 0] += -dq * (2.0 * conic[g, 0] * dx
                                              + 2.0 * conic[g, 1] * dy)
                    d_means2d[g, 1] += -dq * (2.0 * conic[g, 1] * dx
                                              + 2.0 * conic[g, 2] * dy)


@numba.njit(cache=True)
def splat_weight_kernel(sorted_ids, tile_starts, tile_ends,
                        means2d, conic, opacity,
                        height, width, tile_size, n_tiles_x,
                        alpha_clamp, alpha_min, t_min,
                        pixel_mask, max_weight):
    """Per-splat maximum blend weight over pixels where pixel_mask is set."""
    n_tiles = tile_starts.shape[0]
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        start = tile_starts[tile]
        end = tile_ends[tile]
        for py in range(y0, y1):
            for px in range(x0, x1):
                if not pixel_mask[py, px]:
                    continue
                cx = px + 0.5
                cy = py + 0.5
                t = 1.0
                for s in range(start, end):
                    g = sorted_ids[s]
                    dx = cx - means2d[g, 0]
                    dy = cy - means2d[g, 1]
                    q = (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                         + conic[g, 2] * dy * dy)
                    if q < 0.0:
                        continue
                    a = opacity[g] * np.exp(-0.5 * q)
                    if a > alpha_clamp:
                        a = alpha_clamp
                    if a < alpha_min:
                        continue
                    next_t = t * (1.0 - a)
                    if next_t < t_min:
                        break
                    w = a * t
                    if w > max_weight[g]:
                        max_weight[g] = w
                    t = next_t
