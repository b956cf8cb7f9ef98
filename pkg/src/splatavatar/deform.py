"""Time-conditioned deformation field for asset Gaussians.

A small MLP maps (frequency-encoded reposed position, frequency-encoded
time) to residual position / rotation / log-scale changes applied on top
of the reposed state.  Heads are zero-initialized so an untrained field is
exactly the identity.  Forward, backward, and the d/dt Jacobian are all
hand-written numpy (the network is tiny; autodiff would be overkill).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_normalize, quat_to_matrix
from .gradients import quat_matrix_backward
from .losses import frames_mse
from .rasterizer import RasterConfig, render
from .scene import Camera, GaussianSet, LAYER_ASSET, SkinnedMesh
from .skinning import Pose, Reposed, pose_mesh, repose

POS_BANDS = 6
TIME_BANDS = 4
HIDDEN = 128
N_HIDDEN_LAYERS = 4
SKIP_LAYER = 3  # input re-enters at this hidden layer (1-based)

DEFORM_MAGIC = b"SPLATDEFORM"
DEFORM_VERSION = 1


class TooFewFrames(ValueError):
    pass


def encode_position(pos, n_bands=POS_BANDS):
    """sin/cos features at octave frequencies; (N,3) -> (N, 6*n_bands)."""
    pos = np.asarray(pos, dtype=np.float64)
    freqs = (2.0 ** np.arange(n_bands)) * np.pi
    arg = pos[:, :, None] * freqs  # (N,3,L)
    return np.concatenate([np.sin(arg), np.cos(arg)],
                          axis=2).reshape(len(pos), -1)


def encode_time(t, n_bands=TIME_BANDS):
    freqs = (2.0 ** np.arange(n_bands)) * np.pi
    arg = t * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


def encode_time_dt(t, n_bands=TIME_BANDS):
    """d(encode_time)/dt."""
    freqs = (2.0 ** np.arange(n_bands)) * np.pi
    arg = t * freqs
    return np.concatenate([freqs * np.cos(arg), -freqs * np.sin(arg)])


INPUT_DIM = 6 * POS_BANDS + 2 * TIME_BANDS  # 44


@dataclass
class DeformField:
    """4x128 tanh MLP with an input skip into layer 3 and three zero-init
    heads: dpos (3), drot (4, composed as normalize((1,0,0,0)+d)), dls (3).
    """

    params: dict
    seed: int = 0

    @staticmethod
    def create(seed=0, hidden=HIDDEN):
        rng = np.random.default_rng(seed)

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, (n_out, n_in))

        p = {}
        in_dims = [INPUT_DIM, hidden, hidden + INPUT_DIM, hidden]
        for i, d_in in enumerate(in_dims, start=1):
            p[f"w{i}"] = glorot(d_in, hidden)
            p[f"b{i}"] = np.zeros(hidden)
        for head, d_out in (("pos", 3), ("rot", 4), ("ls", 3)):
            p[f"w_{head}"] = np.zeros((d_out, hidden))
            p[f"b_{head}"] = np.zeros(d_out)
        return DeformField(params=p, seed=seed)

    # -- forward ----------------------------------------------------------
    def _encode(self, positions, t):
        zp = encode_position(positions)
        zt = np.broadcast_to(encode_time(t), (len(zp), 2 * TIME_BANDS))
        return np.concatenate([zp, zt], axis=1)

    def forward(self, positions, t, with_cache=False):
        """Residuals (dpos (N,3), drot (N,4), dls (N,3)) at time t."""
        p = self.params
        z0 = self._encode(positions, t)
        h1 = np.tanh(z0 @ p["w1"].T + p["b1"])
        h2 = np.tanh(h1 @ p["w2"].T + p["b2"])
        z3 = np.concatenate([h2, z0], axis=1)
        h3 = np.tanh(z3 @ p["w3"].T + p["b3"])
        h4 = np.tanh(h3 @ p["w4"].T + p["b4"])
        dpos = h4 @ p["w_pos"].T + p["b_pos"]
        drot = h4 @ p["w_rot"].T + p["b_rot"]
        dls = h4 @ p["w_ls"].T + p["b_ls"]
        if with_cache:
            return (dpos, drot, dls), (z0, h1, h2, z3, h3, h4)
        return dpos, drot, dls

    def backward(self, cache, g_pos, g_rot, g_ls):
        """Parameter gradients from per-row output gradients."""
        p = self.params
        z0, h1, h2, z3, h3, h4 = cache
        g = {}
        g["w_pos"] = g_pos.T @ h4
        g["b_pos"] = g_pos.sum(0)
        g["w_rot"] = g_rot.T @ h4
        g["b_rot"] = g_rot.sum(0)
        g["w_ls"] = g_ls.T @ h4
        g["b_ls"] = g_ls.sum(0)
        gh4 = g_pos @ p["w_pos"] + g_rot @ p["w_rot"] + g_ls @ p["w_ls"]
        gh4 = gh4 * (1.0 - h4 * h4)
        g["w4"] = gh4.T @ h3
        g["b4"] = gh4.sum(0)
        gh3 = (gh4 @ p["w4"]) * (1.0 - h3 * h3)
        g["w3"] = gh3.T @ z3
        g["b3"] = gh3.sum(0)
        gz3 = gh3 @ p["w3"]
        gh2 = gz3[:, :h2.shape[1]] * (1.0 - h2 * h2)
        g["w2"] = gh2.T @ h1
        g["b2"] = gh2.sum(0)
        gh1 = (gh2 @ p["w2"]) * (1.0 - h1 * h1)
        g["w1"] = gh1.T @ z0
        g["b1"] = gh1.sum(0)
        return g

    def dt_jacobian(self, positions, t):
        """Analytic d(dpos)/dt via forward-mode through the network."""
        p = self.params
        _, cache = self.forward(positions, t, with_cache=True)
        z0, h1, h2, z3, h3, h4 = cache
        dz0 = np.zeros_like(z0)
        dz0[:, 6 * POS_BANDS:] = encode_time_dt(t)
        dh1 = (dz0 @ p["w1"].T) * (1.0 - h1 * h1)
        dh2 = (dh1 @ p["w2"].T) * (1.0 - h2 * h2)
        dz3 = np.concatenate([dh2, dz0], axis=1)
        dh3 = (dz3 @ p["w3"].T) * (1.0 - h3 * h3)
        dh4 = (dh3 @ p["w4"].T) * (1.0 - h4 * h4)
        return dh4 @ p["w_pos"].T

    def param_names(self):
        return sorted(self.params)

    def copy(self):
        return DeformField({k: v.copy() for k, v in self.params.items()},
                           self.seed)


def residual_quaternion(drot):
    """Map raw head output to a unit quaternion: normalize((1,0,0,0)+d)."""
    q = np.array(drot, dtype=np.float64, copy=True)
    q[:, 0] += 1.0
    return quat_normalize(q)


def apply_deform(field: DeformField, gaussians: GaussianSet,
                 reposed: Reposed, t):
    """Deformed copy of the reposed state; body rows pass through untouched."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0,1]")
    asset = gaussians.layer == LAYER_ASSET
    positions = reposed.positions.copy()
    rotations = reposed.rotations.copy()
    scales = reposed.scales.copy()
    if asset.any():
        dpos, drot, dls = field.forward(positions[asset], t)
        positions[asset] += dpos
        dq = residual_quaternion(drot)
        rotations[asset] = np.einsum("nij,njk->nik", quat_to_matrix(dq),
                                     rotations[asset])
        scales[asset] *= np.exp(dls)
    return Reposed(positions=positions, rotations=rotations, scales=scales,
                   transport=reposed.transport)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FrameSample:
    t: float
    pose: Pose
    cam: Camera
    image: np.ndarray


@dataclass
class DeformTrainConfig:
    iters: int = 500
    lr: float = 1e-3
    w_ref: float = 1.0
    w_aux: float = 1.0
    # motion prior: small quadratic penalty on the rotation and scale
    # residuals, so appearance changes are explained by translation first.
    # Without it the rotation/scale heads can mimic sub-pixel motion.
    w_reg: float = 1e-2
    seed: int = 0


def _field_world_grads(field, gaussians, reposed, deformed, t, wg):
    """Chain WorldGrads through the residual heads to field parameters."""
    asset = gaussians.layer == LAYER_ASSET
    n = len(gaussians)
    d_positions = np.zeros((n, 3))
    d_rotations = np.zeros((n, 3, 3))
    d_scales = np.zeros((n, 3))
    d_positions[wg.keep_idx] = wg.d_positions
    d_rotations[wg.keep_idx] = wg.d_rotations
    d_scales[wg.keep_idx] = wg.d_scales

    (dpos, drot, dls), cache = field.forward(reposed.positions[asset], t,
                                             with_cache=True)
    g_pos = d_positions[asset]
    # R'' = R(dq) R'  =>  dL/dR(dq) = dL/dR'' . R'^T
    d_rdq = np.einsum("nij,nkj->nik", d_rotations[asset],
                      reposed.rotations[asset])
    q_raw = np.array(drot, copy=True)
    q_raw[:, 0] += 1.0
    g_rot = quat_matrix_backward(q_raw, d_rdq)
    # s'' = s' exp(dls)
    g_ls = d_scales[asset] * reposed.scales[asset] * np.exp(dls)
    return field.backward(cache, g_pos, g_rot, g_ls)


def train_deform(gaussians: GaussianSet, mesh: SkinnedMesh, frames,
                 aux_views=None, cfg: DeformTrainConfig = None,
                 raster_cfg: RasterConfig = None, log_fn=None):
    """Fit a DeformField to a reference sequence; Gaussian parameters stay
    fixed.  aux_views, when given, is a per-frame list of (Camera, image)
    pairs adding a multi-view MSE term.  Returns (field, log)."""
    if len(frames) < 2:
        raise TooFewFrames("need at least 2 frames")
    if cfg is None:
        cfg = DeformTrainConfig()
    field_ = DeformField.create(cfg.seed)
    names = field_.param_names()
    m = {k: np.zeros_like(field_.params[k]) for k in names}
    v = {k: np.zeros_like(field_.params[k]) for k in names}
    b1, b2, eps = 0.9, 0.999, 1e-15
    rng = np.random.default_rng(cfg.seed)
    log = []

    # posed meshes are pose-only; cache them across iterations
    posed_cache = [pose_mesh(mesh, fr.pose) for fr in frames]

    for it in range(cfg.iters):
        fi = int(rng.integers(len(frames)))
        fr = frames[fi]
        reposed = repose(gaussians, mesh, posed_cache[fi])
        deformed = apply_deform(field_, gaussians, reposed, fr.t)

        grads = {k: np.zeros_like(field_.params[k]) for k in names}
        total = 0.0

        supervision = [(fr.cam, fr.image, cfg.w_ref)]
        if aux_views is not None and aux_views[fi]:
            w_each = cfg.w_aux / len(aux_views[fi])
            supervision += [(c, img, w_each) for c, img in aux_views[fi]]
        for cam, image, weight in supervision:
            out, ctx = render(gaussians, deformed, cam, raster_cfg)
            value, g_img = frames_mse(out.color, image)
            total += weight * value
            from .gradients import RenderGrad, project_backward, \
                rasterize_backward
            sg = rasterize_backward(ctx, RenderGrad(color=weight * g_img))
            wg = project_backward(ctx, sg, gaussians.sh)
            fg = _field_world_grads(field_, gaussians, reposed, deformed,
                                    fr.t, wg)
            for k in names:
                grads[k] += fg[k]

        if cfg.w_reg > 0.0:
            asset = gaussians.layer == LAYER_ASSET
            (dpos, drot, dls), cache = field_.forward(
                reposed.positions[asset], fr.t, with_cache=True)
            n_a = max(1, int(asset.sum()))
            total += cfg.w_reg * ((drot ** 2).sum() + (dls ** 2).sum()) / n_a
            rg = field_.backward(cache, np.zeros_like(dpos),
                                 cfg.w_reg * 2.0 * drot / n_a,
                                 cfg.w_reg * 2.0 * dls / n_a)
            for k in names:
                grads[k] += rg[k]

        tt = it + 1
        for k in names:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            field_.params[k] -= cfg.lr * (m[k] / (1 - b1 ** tt)) / (
                np.sqrt(v[k] / (1 - b2 ** tt)) + eps)

        entry = {"iter": tt, "frame": fi, "ref": total}
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return field_, log


def animate(gaussians: GaussianSet, mesh: SkinnedMesh, poses, cams,
            field_: DeformField = None, times=None,
            raster_cfg: RasterConfig = None):
    """Render one frame per pose.  cams may be one Camera or one per pose;
    times default to a uniform [0,1] ramp."""
    n = len(poses)
    if isinstance(cams, Camera):
        cams = [cams] * n
    if times is None:
        times = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    outputs = []
    for pose, cam, t in zip(poses, cams, times):
        posed = pose_mesh(mesh, pose)
        reposed = repose(gaussians, mesh, posed)
        if field_ is not None:
            reposed = apply_deform(field_, gaussians, reposed, float(t))
        out, _ = render(gaussians, reposed, cam, raster_cfg)
        outputs.append(out)
    return outputs


# ---------------------------------------------------------------------------
# serialization: JSON header + raw float64 blob
# ---------------------------------------------------------------------------

def save_deform(field_: DeformField, path):
    names = field_.param_names()
    header = {
        "version": DEFORM_VERSION,
        "pos_bands": POS_BANDS,
        "time_bands": TIME_BANDS,
        "seed": field_.seed,
        "params": [[k, list(field_.params[k].shape)] for k in names],
    }
    hdr = json.dumps(header).encode()
    blob = b"".join(np.ascontiguousarray(field_.params[k]).tobytes()
                    for k in names)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(DEFORM_MAGIC + b"\n")
        fh.write(len(hdr).to_bytes(8, "little"))
        fh.write(hdr)
        fh.write(blob)
    os.replace(tmp, path)


def load_deform(path) -> DeformField:
    with open(path, "rb") as fh:
        magic = fh.read(len(DEFORM_MAGIC) + 1)
        if magic != DEFORM_MAGIC + b"\n":
            raise ValueError("not a deform field file")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n))
        if header["version"] != DEFORM_VERSION:
            raise ValueError(f"unsupported deform version {header['version']}")
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            params[name] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return DeformField(params=params, seed=header.get("seed", 0))
