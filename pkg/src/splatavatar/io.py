"""Serialization: splat PLY files, mesh/pose/camera JSON, images, masks.

All writers are atomic (temp file + rename).  Splat files are standard
binary little-endian PLY with the attribute schema below, so generic PLY
tools can at least inspect them; the header carries a format version and
the content hash of the embedding mesh.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np
from PIL import Image

from .geometry import quat_to_matrix
from .scene import Camera, GaussianSet, IDENTITY_DIM, SkinnedMesh
from .skinning import Pose

SPLAT_VERSION = 1
MESH_VERSION = 1
POSE_VERSION = 1


class MalformedHeader(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class MeshHashMismatch(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


class UnsupportedFormat(ValueError):
    pass


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-io-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# splat PLY
# ---------------------------------------------------------------------------

def _splat_dtype(n_sh):
    fields = [("face_index", "<u4"), ("sigma", "<f4"), ("beta", "<f4"),
              ("gamma", "<f4"), ("rot_w", "<f4"), ("rot_x", "<f4"),
              ("rot_y", "<f4"), ("rot_z", "<f4")]
    fields += [(f"log_scale_{i}", "<f4") for i in range(3)]
    fields += [("opacity_logit", "<f4")]
    fields += [(f"sh_{i}", "<f4") for i in range(n_sh)]
    fields += [(f"identity_{i}", "<f4") for i in range(IDENTITY_DIM)]
    fields += [("layer", "u1"), ("frozen", "u1")]
    return np.dtype(fields)


_PLY_TYPES = {"<u4": "uint", "<f4": "float", "u1": "uchar"}


def save_scene(gaussians: GaussianSet, path, mesh: SkinnedMesh):
    """Write the set as binary PLY (float32 payload) bound to `mesh`."""
    n = len(gaussians)
    n_sh = gaussians.sh.shape[1] * 3
    dtype = _splat_dtype(n_sh)
    rec = np.empty(n, dtype=dtype)
    rec["face_index"] = gaussians.face_index
    for i, name in enumerate(("sigma", "beta", "gamma")):
        rec[name] = gaussians.offsets[:, i]
    for i, name in enumerate(("rot_w", "rot_x", "rot_y", "rot_z")):
        rec[name] = gaussians.rotation[:, i]
    for i in range(3):
        rec[f"log_scale_{i}"] = gaussians.log_scale[:, i]
    rec["opacity_logit"] = gaussians.opacity_logit
    sh_flat = gaussians.sh.reshape(n, -1)
    for i in range(n_sh):
        rec[f"sh_{i}"] = sh_flat[:, i]
    for i in range(IDENTITY_DIM):
        rec[f"identity_{i}"] = gaussians.identity[:, i]
    rec["layer"] = gaussians.layer
    rec["frozen"] = gaussians.frozen.astype(np.uint8)

    lines = ["ply", "format binary_little_endian 1.0",
             f"comment splat_version {SPLAT_VERSION}",
             f"comment sh_degree {gaussians.sh_degree}",
             f"comment mesh_hash {mesh.content_hash()}",
             f"element vertex {n}"]
    for name, (dt, _) in dtype.fields.items():
        base = dt.base if dt.subdtype else dt
        lines.append(f"property {_PLY_TYPES[base.str.lstrip('|=')]} {name}")
    lines.append("end_header")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii")
                  + rec.tobytes())


def load_scene(path, mesh: SkinnedMesh = None) -> GaussianSet:
    """Load a splat PLY; checks version, schema, and (if given) mesh hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise MalformedHeader(f"{path}: not a splat PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    meta, props, count = {}, [], None
    for line in header[1:]:
        parts = line.split()
        if parts[0] == "comment" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise MalformedHeader(f"{path}: unexpected element {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[2], parts[1]))
    if count is None or "splat_version" not in meta:
        raise MalformedHeader(f"{path}: missing element/version")
    if int(meta["splat_version"]) != SPLAT_VERSION:
        raise VersionMismatch(
            f"{path}: splat version {meta['splat_version']}, "
            f"expected {SPLAT_VERSION}")
    if mesh is not None and meta.get("mesh_hash") != mesh.content_hash():
        raise MeshHashMismatch(
            f"{path}: scene was embedded on a different mesh")

    n_sh = sum(1 for name, _ in props if name.startswith("sh_"))
    n_id = sum(1 for name, _ in props if name.startswith("identity_"))
    if n_id != IDENTITY_DIM:
        raise MalformedHeader(
            f"{path}: identity vector length {n_id}, expected {IDENTITY_DIM}")
    degree = int(meta.get("sh_degree", 0))
    if n_sh != 3 * (degree + 1) ** 2:
        raise MalformedHeader(f"{path}: sh property count {n_sh} does not "
                              f"match degree {degree}")
    dtype = _splat_dtype(n_sh)
    expected = [(name, _PLY_TYPES[
        (dt.base if dt.subdtype else dt).str.lstrip('|=')])
        for name, (dt, _) in dtype.fields.items()]
    if props != expected:
        raise MalformedHeader(f"{path}: unexpected property schema")
    if len(body) < count * dtype.itemsize:
        raise MalformedHeader(f"{path}: truncated payload")
    rec = np.frombuffer(body[:count * dtype.itemsize], dtype=dtype)

    sh = np.stack([rec[f"sh_{i}"] for i in range(n_sh)],
                  axis=1).astype(np.float64).reshape(count, n_sh // 3, 3)
    return GaussianSet(
        face_index=rec["face_index"].astype(np.int64),
        offsets=np.stack([rec["sigma"], rec["beta"], rec["gamma"]],
                         axis=1).astype(np.float64),
        rotation=np.stack([rec["rot_w"], rec["rot_x"], rec["rot_y"],
                           rec["rot_z"]], axis=1).astype(np.float64),
        log_scale=np.stack([rec[f"log_scale_{i}"] for i in range(3)],
                           axis=1).astype(np.float64),
        opacity_logit=rec["opacity_logit"].astype(np.float64),
        sh=sh,
        identity=np.stack([rec[f"identity_{i}"]
                           for i in range(IDENTITY_DIM)],
                          axis=1).astype(np.float64),
        layer=rec["layer"].copy(),
        frozen=rec["frozen"].astype(bool))


# ---------------------------------------------------------------------------
# mesh JSON
# ---------------------------------------------------------------------------

def save_mesh(mesh: SkinnedMesh, path):
    sparse = []
    for row in mesh.skin_weights:
        nz = np.nonzero(row)[0]
        sparse.append([[int(j), float(row[j])] for j in nz])
    doc = {
        "version": MESH_VERSION,
        "vertices": mesh.vertices.tolist(),
        "faces": mesh.faces.tolist(),
        "joints": {
            "names": list(mesh.joint_names),
            "parents": np.asarray(mesh.joint_parents).tolist(),
            "transforms": np.asarray(mesh.joint_transforms).tolist(),
        },
        "skin_weights": sparse,
        "face_regions": {k: np.asarray(v).tolist()
                         for k, v in mesh.face_regions.items()},
    }
    _atomic_write(path, (json.dumps(doc) + "\n").encode())


def load_mesh(path) -> SkinnedMesh:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MESH_VERSION:
        raise VersionMismatch(f"{path}: mesh version {doc.get('version')}")
    joints = doc["joints"]
    n_vertices = len(doc["vertices"])
    n_joints = len(joints["names"])
    weights = np.zeros((n_vertices, n_joints))
    for vi, pairs in enumerate(doc["skin_weights"]):
        for j, w in pairs:
            weights[vi, int(j)] = w
    sums = weights.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-3):
        raise ValueError(f"{path}: skin weight rows do not sum to 1")
    weights /= sums[:, None]
    return SkinnedMesh(
        vertices=np.asarray(doc["vertices"], dtype=np.float64),
        faces=np.asarray(doc["faces"], dtype=np.int64),
        joint_names=list(joints["names"]),
        joint_parents=np.asarray(joints["parents"], dtype=np.int64),
        joint_transforms=np.asarray(joints["transforms"], dtype=np.float64),
        skin_weights=weights,
        face_regions={k: np.asarray(v, dtype=np.int64)
                      for k, v in doc.get("face_regions", {}).items()})


# ---------------------------------------------------------------------------
# pose sequences
# ---------------------------------------------------------------------------

def _transform_from(entry):
    t = np.eye(4)
    t[:3, :3] = quat_to_matrix(np.asarray(entry["quat"], dtype=np.float64))
    t[:3, 3] = entry["translation"]
    return t


def save_pose_sequence(poses, mesh: SkinnedMesh, path, times=None):
    from .geometry import matrix_to_quat
    frames = []
    for pose in poses:
        entry = {}
        for j, name in enumerate(mesh.joint_names):
            m = pose.joint_transforms[j]
            entry[name] = {"quat": matrix_to_quat(m[:3, :3]).tolist(),
                           "translation": m[:3, 3].tolist()}
        entry["__root__"] = {
            "quat": matrix_to_quat(pose.root[:3, :3]).tolist(),
            "translation": pose.root[:3, 3].tolist()}
        frames.append(entry)
    doc = {"version": POSE_VERSION, "frames": frames}
    if times is not None:
        doc["timestamps"] = list(map(float, times))
    _atomic_write(path, (json.dumps(doc) + "\n").encode())


def load_pose_sequence(path, mesh: SkinnedMesh):
    """Returns (poses, timestamps or None); joint names must match the mesh."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != POSE_VERSION:
        raise VersionMismatch(f"{path}: pose version {doc.get('version')}")
    poses = []
    for fi, frame in enumerate(doc["frames"]):
        names = set(frame) - {"__root__"}
        if names != set(mesh.joint_names):
            raise ValueError(
                f"{path}: frame {fi} joints {sorted(names)} do not match "
                f"mesh joints {sorted(mesh.joint_names)}")
        jt = np.stack([_transform_from(frame[name])
                       for name in mesh.joint_names])
        root = _transform_from(frame["__root__"]) if "__root__" in frame \
            else np.eye(4)
        poses.append(Pose(joint_transforms=jt, root=root))
    times = doc.get("timestamps")
    if times is not None:
        times = np.asarray(times, dtype=np.float64)
    return poses, times


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def save_camera(cam: Camera, path):
    doc = {"world_to_cam": np.asarray(cam.world_to_cam).tolist(),
           "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
           "width": cam.width, "height": cam.height, "near": cam.near}
    _atomic_write(path, (json.dumps(doc) + "\n").encode())


def load_camera(path) -> Camera:
    with open(path) as fh:
        doc = json.load(fh)
    return Camera(world_to_cam=np.asarray(doc["world_to_cam"],
                                          dtype=np.float64),
                  fx=float(doc["fx"]), fy=float(doc["fy"]),
                  cx=float(doc["cx"]), cy=float(doc["cy"]),
                  width=int(doc["width"]), height=int(doc["height"]),
                  near=float(doc.get("near", 0.01)))


# ---------------------------------------------------------------------------
# images and masks
# ---------------------------------------------------------------------------

def load_image(path):
    """8-bit sRGB file -> (H,W,3) float in [0,1], mapped linearly."""
    img = Image.open(path)
    if img.mode in ("I", "I;16", "I;16B", "F"):
        raise UnsupportedFormat(f"{path}: 16-bit/float images unsupported")
    img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(image, path):
    """(H,W,3) floats in [0,1] -> 8-bit PNG (values clipped then rounded)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    img = Image.fromarray(data, mode="RGB")
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".png", prefix=".tmp-io-")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_mask(path):
    """Indexed-color mask file -> (H,W) uint8 labels in 0..14."""
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise UnsupportedFormat(
            f"{path}: masks must be indexed or 8-bit grayscale, "
            f"got mode {img.mode}")
    labels = np.asarray(img, dtype=np.uint8)
    if labels.max(initial=0) >= IDENTITY_DIM:
        raise LabelOutOfRange(
            f"{path}: label {labels.max()} outside 0..{IDENTITY_DIM - 1}")
    return labels


def save_mask(labels, path):
    labels = np.asarray(labels)
    if labels.max(initial=0) >= IDENTITY_DIM:
        raise LabelOutOfRange("labels must be < 15")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    # simple distinguishable palette for the 15 categories
    palette = []
    for i in range(256):
        palette += [(i * 53) % 256, (i * 97) % 256, (i * 151) % 256]
    img.putpalette(palette)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".png", prefix=".tmp-io-")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
