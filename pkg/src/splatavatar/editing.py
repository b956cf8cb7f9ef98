"""Group-level asset edits: removal, recoloring, extraction, transfer.

Groups are defined by argmax identity over the asset layer; the body layer
is never touched by any operation here.
"""

from __future__ import annotations

import numpy as np

from .geometry import _C0
from .gradients import RenderGrad, backward
from .losses import image_loss_ori
from .rasterizer import RasterConfig, render
from .scene import (GaussianSet, IDENTITY_DIM, InvalidCategory, LAYER_ASSET,
                    SkinnedMesh)
from .skinning import face_axis_ratios, repose


class EmptyGroup(ValueError):
    pass


class TopologyMismatch(ValueError):
    pass


def _check_category(category):
    if not 1 <= int(category) <= IDENTITY_DIM - 1:
        raise InvalidCategory(f"category must be in 1..{IDENTITY_DIM - 1}, "
                              f"got {category}")
    return int(category)


def group_mask(gaussians: GaussianSet, category):
    category = _check_category(category)
    return (gaussians.layer == LAYER_ASSET) & \
        (gaussians.categories() == category)


def remove_group(gaussians: GaussianSet, category) -> GaussianSet:
    """Scene without the asset Gaussians classified as `category`."""
    return gaussians.select(~group_mask(gaussians, category))


def recolor_group(gaussians: GaussianSet, category, target, iters=300,
                  mesh: SkinnedMesh = None, lr=5e-2,
                  raster_cfg: RasterConfig = None) -> GaussianSet:
    """Re-fit only the SH of one group; every other byte stays identical.

    target: either a flat (r,g,b) triple, fit per-Gaussian in closed-form
    fashion (gradient steps on the direct color error), or a list of
    (Camera, image) pairs, fit through the renderer (requires mesh).
    """
    group = group_mask(gaussians, category)
    if not group.any():
        raise EmptyGroup(f"no asset Gaussians in category {category}")
    out = gaussians.copy()
    # neutral-gray reinitialization
    out.sh[group] = 0.0
    out.sh[group, 0, :] = 0.5 / _C0

    flat = None
    if not (isinstance(target, (list, tuple)) and len(target) > 0
            and isinstance(target[0], (list, tuple))):
        arr = np.asarray(target, dtype=np.float64)
        if arr.shape == (3,):
            flat = arr
    if flat is not None:
        # direct per-Gaussian color fit: color = C0 * dc.  Plain gradient
        # descent with a step sized for fast geometric convergence.
        flat_lr = 1.0
        for _ in range(iters):
            color = _C0 * out.sh[group, 0, :]
            out.sh[group, 0, :] -= flat_lr * 2.0 * _C0 * (color - flat)
        return out

    if mesh is None:
        raise ValueError("image-target recolor needs the embedding mesh")
    from .lifecycle import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
    m = np.zeros_like(out.sh)
    v = np.zeros_like(out.sh)
    for it in range(iters):
        cam, image = target[it % len(target)]
        reposed = repose(out, mesh)
        rendered, ctx = render(out, reposed, cam, raster_cfg)
        _, g_img = image_loss_ori(rendered.color, image)
        grads = backward(out, reposed, ctx, RenderGrad(color=g_img),
                         respect_frozen=False)
        g = grads.d_sh
        g[~group] = 0.0
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        step = lr * (m / (1 - ADAM_BETA1 ** (it + 1))) / (
            np.sqrt(v / (1 - ADAM_BETA2 ** (it + 1))) + ADAM_EPS)
        out.sh[group] -= step[group]
    return out


def extract_group(gaussians: GaussianSet, category, mesh: SkinnedMesh):
    """(group-only GaussianSet, the canonical mesh its embeddings refer to)."""
    group = group_mask(gaussians, category)
    if not group.any():
        raise EmptyGroup(f"no asset Gaussians in category {category}")
    return gaussians.select(group), mesh


def transfer_group(asset: GaussianSet, source: SkinnedMesh,
                   target: SkinnedMesh) -> GaussianSet:
    """Re-embed an asset set from one body onto another of equal topology.

    Face indices are kept; offsets and scales are rescaled per face by the
    per-axis canonical frame-length ratios between target and source — the
    same transport rule reposing uses between canonical and posed frames.
    """
    if source.faces.shape != target.faces.shape or \
            not np.array_equal(source.faces, target.faces):
        raise TopologyMismatch("source and target meshes must share face "
                               "topology")
    ratios = face_axis_ratios(source.face_vertices(), target.face_vertices())
    out = asset.copy()
    r = ratios[out.face_index]
    out.offsets = out.offsets * r
    out.log_scale = out.log_scale + np.log(r)
    return out
