"""The optimization loop: Adam updates, pruning, category-guided
densification, occluded-skin inpainting, and body Gaussian construction.
"""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .geometry import quat_normalize, sh_dim
from .gradients import (GRAD_FIELDS, PARAM_GROUPS, ParamGradients, RenderGrad,
                        backward)
from .losses import (TooFewGaussians, anisotropy, identity_ce,
                     identity_knn_kl, image_loss_ori, sdf_exterior)
from .rasterizer import RasterConfig, render, splat_max_weights
from .scene import (FACE_CATEGORY, GaussianSet, IDENTITY_DIM, LAYER_ASSET,
                    LAYER_BODY, SKIN_CATEGORY, SkinnedMesh, embed_points,
                    resolve_positions)
from .sdf import MeshSDF
from .skinning import repose

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

BODY_IDENTITY_MAGNITUDE = 8.0
BODY_OPACITY = 0.99


class ShapeMismatch(ValueError):
    pass


class NoVisibleBody(RuntimeError):
    pass


class AdamState:
    """First/second moment buffers per parameter group, shaped like the set."""

    def __init__(self, gaussians: GaussianSet):
        self.t = 0
        self.m = {}
        self.v = {}
        for name in PARAM_GROUPS:
            arr = getattr(gaussians, name)
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)

    def keep(self, mask):
        for name in PARAM_GROUPS:
            self.m[name] = self.m[name][mask].copy()
            self.v[name] = self.v[name][mask].copy()

    def append(self, n_new):
        for name in PARAM_GROUPS:
            pad = np.zeros((n_new,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])


def adam_step(gaussians: GaussianSet, grads: ParamGradients, state: AdamState,
              lr_per_group: dict):
    """One Adam update in place; frozen rows are untouched."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    free = ~gaussians.frozen
    for name in PARAM_GROUPS:
        param = getattr(gaussians, name)
        grad = getattr(grads, GRAD_FIELDS[name])
        if grad.shape != param.shape:
            raise ShapeMismatch(f"{name}: grad {grad.shape} vs param {param.shape}")
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        step = lr_per_group[name] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        param[free] -= step[free]
    return gaussians


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def prune_inside_mask(gaussians: GaussianSet, mesh: SkinnedMesh,
                      posed_vertices=None, mesh_sdf: MeshSDF = None):
    """Removal mask for asset Gaussians located inside the mesh (sdf < 0)."""
    asset = gaussians.layer == LAYER_ASSET
    remove = np.zeros(len(gaussians), dtype=bool)
    if not asset.any():
        return remove
    pos = resolve_positions(gaussians, mesh, posed_vertices)
    if mesh_sdf is None:
        verts = mesh.vertices if posed_vertices is None else posed_vertices
        mesh_sdf = MeshSDF(verts, mesh.faces)
    sdf = mesh_sdf.query(pos[asset])
    remove[np.nonzero(asset)[0][sdf < 0.0]] = True
    return remove


def prune_transparent_mask(gaussians: GaussianSet, threshold):
    if not 0.0 < threshold < 1.0:
        # threshold 0 prunes nothing by definition; negative is a user error
        if threshold == 0.0:
            return np.zeros(len(gaussians), dtype=bool)
        raise ValueError("threshold must be in [0,1)")
    asset = gaussians.layer == LAYER_ASSET
    return asset & (gaussians.opacity < threshold)


def prune_inside(gaussians: GaussianSet, mesh: SkinnedMesh,
                 posed_vertices=None, state: AdamState = None):
    """Remove inside-body asset Gaussians.  Returns (new set, removal count)."""
    remove = prune_inside_mask(gaussians, mesh, posed_vertices)
    if not remove.any():
        return gaussians, 0
    keep = ~remove
    if state is not None:
        state.keep(keep)
    return gaussians.select(keep), int(remove.sum())


def prune_transparent(gaussians: GaussianSet, threshold,
                      state: AdamState = None):
    remove = prune_transparent_mask(gaussians, threshold)
    if not remove.any():
        return gaussians, 0
    keep = ~remove
    if state is not None:
        state.keep(keep)
    return gaussians.select(keep), int(remove.sum())


# ---------------------------------------------------------------------------
# densification
# ---------------------------------------------------------------------------

def _mean_quaternion(quats):
    """Sign-aligned arithmetic mean, renormalized."""
    q = quat_normalize(quats)
    ref = q[0]
    flip = (q @ ref) < 0
    q[flip] = -q[flip]
    return quat_normalize(q.mean(axis=0), canonical=True)


def densify_category(gaussians: GaussianSet, mesh: SkinnedMesh, category,
                     n_new, k, rng) -> GaussianSet:
    """New same-category Gaussians sampled around existing members.

    Positions jitter randomly chosen members (sigma = mean member scale);
    each new Gaussian embeds on the majority face of its k nearest
    same-category neighbors and inherits their mean properties.
    Returns the new rows only.
    """
    from scipy.spatial import cKDTree

    asset = gaussians.layer == LAYER_ASSET
    members = np.nonzero(asset & (gaussians.categories() == category))[0]
    if len(members) < k:
        raise TooFewGaussians(
            f"category {category} has {len(members)} members, need >= {k}")
    if n_new == 0:
        return GaussianSet.empty(gaussians.sh_degree)
    positions = resolve_positions(gaussians, mesh)[members]
    jitter_sigma = float(np.exp(gaussians.log_scale[members]).mean())
    chosen = rng.integers(0, len(members), size=n_new)
    new_pos = positions[chosen] + rng.normal(0.0, jitter_sigma, (n_new, 3))
    tree = cKDTree(positions)
    _, nbr = tree.query(new_pos, k=k)
    nbr = np.atleast_2d(nbr)

    face_of = gaussians.face_index[members]
    faces = np.empty(n_new, dtype=np.int64)
    for i in range(n_new):
        cand = face_of[nbr[i]]
        vals, counts = np.unique(cand, return_counts=True)
        faces[i] = vals[np.argmax(counts)]
    offsets = embed_points(new_pos, faces, mesh)

    rot = np.empty((n_new, 4))
    for i in range(n_new):
        rot[i] = _mean_quaternion(gaussians.rotation[members[nbr[i]]])
    log_scale = gaussians.log_scale[members[nbr]].mean(axis=1)
    opacity_logit = gaussians.opacity_logit[members[nbr]].mean(axis=1)
    sh = gaussians.sh[members[nbr]].mean(axis=1)
    identity = gaussians.identity[members[nbr]].mean(axis=1)
    # the new Gaussian must classify as its seeding category
    wrong = identity.argmax(axis=1) != category
    if wrong.any():
        identity[wrong, category] = identity[wrong].max(axis=1) + 1e-3

    return GaussianSet(
        face_index=faces, offsets=offsets, rotation=rot, log_scale=log_scale,
        opacity_logit=opacity_logit, sh=sh, identity=identity,
        layer=np.full(n_new, LAYER_ASSET, dtype=np.uint8),
        frozen=np.zeros(n_new, dtype=bool))


# ---------------------------------------------------------------------------
# body construction
# ---------------------------------------------------------------------------

_BARY_1 = np.array([[1 / 3, 1 / 3, 1 / 3]])
_BARY_4 = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
])


def build_body_gaussians(mesh: SkinnedMesh, per_face_count=1, sh_degree=0,
                         identity_magnitude=BODY_IDENTITY_MAGNITUDE):
    """Flat body Gaussians bound to every mesh face.

    Gaussians sit at fixed barycentric sites (centroid for 1 per face,
    centroid plus edge midpoints for 4), aligned to the face frame with the
    thin axis along the normal at 0.1 of the in-plane scale; opacity 0.99,
    frozen, fixed skin/face identity label.
    """
    if per_face_count == 1:
        bary = _BARY_1
    elif per_face_count == 4:
        bary = _BARY_4
    else:
        raise ValueError("per_face_count must be 1 or 4")
    tri = mesh.face_vertices()
    n_faces = len(tri)

    sites = np.einsum("sb,fbk->fsk", bary, tri)      # (F,S,3)
    face_index = np.repeat(np.arange(n_faces, dtype=np.int64), len(bary))
    points = sites.reshape(-1, 3)
    offsets = embed_points(points, face_index, mesh)
    offsets[:, 2] = 0.0  # in-plane by construction; clamp numeric noise

    # incircle radius r = 2*area / perimeter
    e = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1],
                  tri[:, 0] - tri[:, 2]], axis=1)
    lengths = np.linalg.norm(e, axis=2)
    area = 0.5 * np.linalg.norm(np.cross(e[:, 0], -e[:, 2]), axis=1)
    incircle = 2.0 * area / lengths.sum(axis=1)
    in_plane = np.repeat(incircle, len(bary))

    n = len(face_index)
    log_scale = np.stack([np.log(in_plane), np.log(in_plane),
                          np.log(0.1 * in_plane)], axis=1)
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0  # identity: axes follow the face frame

    opacity_logit = np.full(n, np.log(BODY_OPACITY / (1.0 - BODY_OPACITY)))

    identity = np.zeros((n, IDENTITY_DIM))
    label = np.full(n_faces, SKIN_CATEGORY, dtype=np.int64)
    face_region = mesh.face_regions.get("face")
    if face_region is not None:
        label[np.asarray(face_region, dtype=np.int64)] = FACE_CATEGORY
    identity[np.arange(n), np.repeat(label, len(bary))] = identity_magnitude

    sh = np.zeros((n, sh_dim(sh_degree), 3))
    sh[:, 0, :] = 0.5 / 0.28209479177387814  # mid gray until colors are fit

    return GaussianSet(
        face_index=face_index, offsets=offsets, rotation=rotation,
        log_scale=log_scale, opacity_logit=opacity_logit, sh=sh,
        identity=identity,
        layer=np.full(n, LAYER_BODY, dtype=np.uint8),
        frozen=np.ones(n, dtype=bool))


def seed_asset_gaussians(mesh: SkinnedMesh, categories, settings, seed=0,
                         sh_degree=0):
    """Category-seeded asset initialization: random surface points pushed
    slightly outward along the face normal, one batch per category."""
    from .geometry import sh_dim as _sh_dim
    from .scene import mesh_frames

    rng = np.random.default_rng(seed)
    _, bases = mesh_frames(mesh)
    normals = bases[:, :, 2]
    tri = mesh.face_vertices()
    sets = []
    for category in categories:
        n = settings.per_category_count
        fi = rng.integers(0, len(tri), n)
        bary = rng.dirichlet([1.5, 1.5, 1.5], n)
        pts = np.einsum("nb,nbk->nk", bary, tri[fi]) \
            + settings.surface_offset * normals[fi]
        identity = np.zeros((n, IDENTITY_DIM))
        identity[:, int(category)] = settings.identity_magnitude
        sh = np.zeros((n, _sh_dim(sh_degree), 3))
        sh[:, 0, :] = 0.5 / 0.28209479177387814
        op = settings.initial_opacity
        sets.append(GaussianSet(
            face_index=fi, offsets=embed_points(pts, fi, mesh),
            rotation=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            log_scale=np.full((n, 3), np.log(settings.initial_scale)),
            opacity_logit=np.full(n, np.log(op / (1.0 - op))),
            sh=sh, identity=identity,
            layer=np.full(n, LAYER_ASSET, dtype=np.uint8),
            frozen=np.zeros(n, dtype=bool)))
    return GaussianSet.concatenate(sets) if sets \
        else GaussianSet.empty(sh_degree)


# ---------------------------------------------------------------------------
# occluded-skin color inpainting
# ---------------------------------------------------------------------------

def compute_body_visibility(gaussians: GaussianSet, mesh: SkinnedMesh, views,
                            raster_cfg: RasterConfig = None,
                            threshold=1.0 / 255.0):
    """A body Gaussian is visible if it contributes weight >= threshold to
    any skin-labeled pixel in any view."""
    visible = np.zeros(len(gaussians), dtype=bool)
    reposed = repose(gaussians, mesh)
    for view in views:
        _, ctx = render(gaussians, reposed, view.cam, raster_cfg)
        mask = np.asarray(view.mask) == SKIN_CATEGORY
        w = splat_max_weights(ctx, mask, n_sources=len(gaussians))
        visible |= w >= threshold
    return visible & (gaussians.layer == LAYER_BODY)


def inpaint_body_color(gaussians: GaussianSet, mesh: SkinnedMesh, views,
                       visibility=None, iters=100, lr=2.5e-2,
                       raster_cfg: RasterConfig = None, tol=1e-3):
    """Fit visible body SH to skin pixels, then pull occluded body colors to
    the visible mean (in place).  Returns the visibility mask used."""
    body = gaussians.layer == LAYER_BODY
    if visibility is None:
        visibility = compute_body_visibility(gaussians, mesh, views, raster_cfg)
    visibility = visibility & body
    if not visibility.any():
        raise NoVisibleBody("no body Gaussian meets the visibility threshold")
    occluded = body & ~visibility

    # phase 1: reconstruct visible skin color against the skin-mask pixels
    state = AdamState(gaussians)
    lrs = {name: 0.0 for name in PARAM_GROUPS}
    lrs["sh"] = lr
    frozen_backup = gaussians.frozen.copy()
    try:
        for it in range(iters):
            view = views[it % len(views)]
            reposed = repose(gaussians, mesh)
            out, ctx = render(gaussians, reposed, view.cam, raster_cfg)
            pix = np.asarray(view.mask) == SKIN_CATEGORY
            if not pix.any():
                continue
            diff = out.color - view.image
            g = np.where(pix[:, :, None], np.sign(diff), 0.0) / max(pix.sum(), 1)
            grads = backward(gaussians, reposed, ctx, RenderGrad(color=g),
                             respect_frozen=False)
            keep = visibility
            for name in PARAM_GROUPS:
                arr = getattr(grads, GRAD_FIELDS[name])
                arr[~keep] = 0.0
            gaussians.frozen = ~visibility  # adam only touches visible rows
            adam_step(gaussians, grads, state, lrs)
    finally:
        gaussians.frozen = frozen_backup

    # phase 2: gradient steps pulling occluded dc coefficients to the
    # visible mean (exponential convergence; iterate to tolerance)
    target = gaussians.sh[visibility, 0, :].mean(axis=0)
    step = 0.2
    for _ in range(2000):
        gap = np.linalg.norm(gaussians.sh[occluded, 0, :].mean(axis=0) - target) \
            if occluded.any() else 0.0
        if gap <= tol * 0.5:
            break
        gaussians.sh[occluded, 0, :] -= step * (gaussians.sh[occluded, 0, :] - target)
    return visibility


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def fit(gaussians: GaussianSet, mesh: SkinnedMesh, views, cfg: TrainConfig,
        log_fn=None):
    """Optimize asset Gaussians against the training views.

    Returns (gaussians, log) where log is a list of per-iteration dicts.
    The first schedule.single_view_iters iterations use only view 0; pruning
    and densification run at their configured intervals.
    """
    if len(views) == 0:
        raise ValueError("need at least one view")
    sched = cfg.schedule
    weights = cfg.weights
    raster_cfg = cfg.raster.build()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(gaussians)
    lr_map = sched.lr.as_dict()
    msdf = MeshSDF(mesh.vertices, mesh.faces)
    log = []

    for it in range(sched.total_iters):
        if it < sched.single_view_iters:
            view = views[0]
        else:
            view = views[int(rng.integers(len(views)))]
        reposed = repose(gaussians, mesh)
        out, ctx = render(gaussians, reposed, view.cam, raster_cfg)

        v_ori, g_ori = image_loss_ori(out.color, view.image,
                                      weights.lambda_ssim)
        v_id2d, g_id2d = identity_ce(out.identity, view.mask)
        up = RenderGrad(color=weights.w_ori * g_ori,
                        identity=weights.w_id2d * g_id2d)
        grads = backward(gaussians, reposed, ctx, up)

        asset = gaussians.layer == LAYER_ASSET
        v_ani, g_ani = anisotropy(gaussians.log_scale[asset], weights.tau)
        grads.d_log_scale[asset] += weights.w_ani * g_ani

        n_asset = int(asset.sum())
        v_id3d = 0.0
        if n_asset >= weights.knn_k + 1:
            v_id3d, g_id3d = identity_knn_kl(
                gaussians.identity[asset], reposed.positions[asset],
                weights.knn_k, weights.knn_m, int(rng.integers(1 << 31)))
            grads.d_identity[asset] += weights.w_id3d * g_id3d

        v_sdf, g_sdf = sdf_exterior(reposed.positions[asset], msdf,
                                    weights.sdf_margin)
        t = reposed.transport
        fidx = gaussians.face_index[asset]
        grads.d_offsets[asset] += weights.w_sdf * (
            np.einsum("nji,nj->ni", t.bases_posed[fidx], g_sdf) * t.ratios[fidx])

        grads.zero_frozen_(gaussians)
        adam_step(gaussians, grads, state, lr_map)

        pruned_in = pruned_tr = added = 0
        if (it + 1) % sched.prune_interval == 0:
            gaussians, pruned_in = prune_inside(gaussians, mesh, state=state)
            gaussians, pruned_tr = prune_transparent(
                gaussians, sched.opacity_prune_threshold, state=state)
        if (sched.densify_start <= it + 1 <= sched.densify_stop
                and (it + 1) % sched.densify_interval == 0):
            asset = gaussians.layer == LAYER_ASSET
            cats = gaussians.categories()[asset]
            budget_left = sched.gaussian_budget - len(gaussians)
            for category in np.unique(cats):
                count = int((cats == category).sum())
                if count < weights.knn_k:
                    continue
                n_new = min(int(sched.densify_fraction * count),
                            max(budget_left, 0))
                if n_new == 0:
                    continue
                new_rows = densify_category(gaussians, mesh, int(category),
                                            n_new, weights.knn_k, rng)
                gaussians = GaussianSet.concatenate([gaussians, new_rows])
                state.append(len(new_rows))
                budget_left -= len(new_rows)
                added += len(new_rows)

        entry = {"iter": it + 1, "ori": v_ori, "id2d": v_id2d,
                 "id3d": v_id3d, "ani": v_ani, "sdf": v_sdf,
                 "n_gaussians": len(gaussians), "pruned_inside": pruned_in,
                 "pruned_transparent": pruned_tr, "densified": added}
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)

    if sched.total_iters > 0:
        gaussians, _ = prune_inside(gaussians, mesh, state=state)
    return gaussians, log
