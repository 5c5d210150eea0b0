"""COLMAP sparse-reconstruction ingestion.

Reads the standard ``cameras`` / ``images`` / ``points3D`` trio in either the
text or the binary layout and converts it to this package's camera and seed
conventions.  Only distortion-free pinhole models are accepted: silently
approximating away radial distortion would corrupt every geometric check
downstream, so RADIAL/OPENCV style models raise instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from splatsurf.scene import (CameraView, GaussianScene, SceneBounds, logit,
                             quat_to_rotmat)

# Model ids from COLMAP's camera model registry.
CAMERA_MODEL_NAMES = {
    0: "SIMPLE_PINHOLE", 1: "PINHOLE", 2: "SIMPLE_RADIAL", 3: "RADIAL",
    4: "OPENCV", 5: "OPENCV_FISHEYE", 6: "FULL_OPENCV", 7: "FOV",
    8: "SIMPLE_RADIAL_FISHEYE", 9: "RADIAL_FISHEYE", 10: "THIN_PRISM_FISHEYE",
}
MODEL_NUM_PARAMS = {0: 3, 1: 4, 2: 4, 3: 5, 4: 8, 5: 8, 6: 12, 7: 5, 8: 4, 9: 5, 10: 12}
SUPPORTED_MODELS = {"SIMPLE_PINHOLE", "PINHOLE"}


class ColmapError(ValueError):
    """Malformed reconstruction file; message carries the file offset."""


class UnsupportedCameraModel(ColmapError):
    def __init__(self, model: str):
        self.model = model
        super().__init__(
            f"camera model {model} is not supported; re-run COLMAP with an "
            f"undistorted pinhole model ({', '.join(sorted(SUPPORTED_MODELS))})")


@dataclass
class ColmapBundle:
    """Cameras, seed points, and image references of one reconstruction."""

    views: list[CameraView]
    image_names: list[str]
    points: np.ndarray        # (P, 3) float64
    point_colors: np.ndarray  # (P, 3) float64 in [0, 1]

    def __post_init__(self):
        if len(self.views) != len(self.image_names):
            raise ValueError("one image name per view required")
        if not np.all(np.isfinite(self.points)):
            raise ColmapError("non-finite seed point positions")

    def bounds(self) -> SceneBounds:
        """Bounding box of seed points and camera centers with 5% padding."""
        pts = [v.camera_center for v in self.views]
        if self.points.size:
            pts.append(self.points.reshape(-1, 3))
        stacked = np.vstack([np.atleast_2d(p) for p in pts])
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
        span = np.maximum(hi - lo, 1e-6)
        return SceneBounds(lo - 0.05 * span, hi + 0.05 * span)


def load_colmap(sparse_dir, images_dir: Optional[Path] = None) -> ColmapBundle:
    """Load a COLMAP sparse model directory (text or binary variant)."""
    sparse_dir = Path(sparse_dir)

    def pick(stem):
        for suffix, reader in ((".bin", True), (".txt", False)):
            path = sparse_dir / (stem + suffix)
            if path.exists():
                return path, reader
        raise FileNotFoundError(f"{sparse_dir} has neither {stem}.bin nor {stem}.txt")

    cam_path, cam_bin = pick("cameras")
    img_path, img_bin = pick("images")
    pts_path, pts_bin = pick("points3D")

    cameras = read_cameras_binary(cam_path) if cam_bin else read_cameras_text(cam_path)
    images = read_images_binary(img_path) if img_bin else read_images_text(img_path)
    xyz, rgb = read_points3d_binary(pts_path) if pts_bin else read_points3d_text(pts_path)

    views: list[CameraView] = []
    names: list[str] = []
    for embedding_id, (image_id, qvec, tvec, camera_id, name) in enumerate(images):
        if camera_id not in cameras:
            raise ColmapError(f"image {image_id} references missing camera {camera_id}")
        model, width, height, params = cameras[camera_id]
        K = _intrinsics_from_model(model, params)
        R_w2c = quat_to_rotmat(np.asarray(qvec))
        center = -R_w2c.T @ np.asarray(tvec, dtype=np.float64)
        view = CameraView(intrinsics=K, rotation_c2w=R_w2c.T, camera_center=center,
                          width=width, height=height,
                          image_path=str((images_dir / name) if images_dir else name),
                          embedding_id=embedding_id, view_id=embedding_id)
        views.append(view)
        names.append(name)
    return ColmapBundle(views=views, image_names=names, points=xyz, point_colors=rgb)


def _intrinsics_from_model(model: str, params) -> np.ndarray:
    if model not in SUPPORTED_MODELS:
        raise UnsupportedCameraModel(model)
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    else:
        fx, fy, cx, cy = params
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


# Text readers.  COLMAP text files carry '#' comment lines and one record per
# line (images.txt: two lines per image, the second holding 2D observations).

def read_cameras_text(path):
    cameras = {}
    for lineno, parts in _data_lines(path):
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(x) for x in parts[4:]]
        except (ValueError, IndexError) as exc:
            raise ColmapError(f"{path}:{lineno}: malformed camera record") from exc
        cameras[cam_id] = (model, width, height, params)
    return cameras


def read_images_text(path):
    images = []
    expecting_points = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if expecting_points:
                expecting_points = False  # 2D observation line (may be blank)
                continue
            if not line:
                continue
            parts = line.split()
            try:
                image_id = int(parts[0])
                qvec = [float(x) for x in parts[1:5]]
                tvec = [float(x) for x in parts[5:8]]
                camera_id = int(parts[8])
                name = parts[9]
            except (ValueError, IndexError) as exc:
                raise ColmapError(f"{path}:{lineno}: malformed image record") from exc
            images.append((image_id, qvec, tvec, camera_id, name))
            expecting_points = True
    images.sort(key=lambda rec: rec[0])
    return images


def read_points3d_text(path):
    xyz, rgb = [], []
    for lineno, parts in _data_lines(path):
        try:
            xyz.append([float(x) for x in parts[1:4]])
            rgb.append([int(x) for x in parts[4:7]])
        except (ValueError, IndexError) as exc:
            raise ColmapError(f"{path}:{lineno}: malformed point record") from exc
    if not xyz:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return (np.asarray(xyz, dtype=np.float64),
            np.asarray(rgb, dtype=np.float64) / 255.0)


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()


# Binary readers, bit-exact per COLMAP's published layout.

def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise ColmapError(f"{path}: truncated {what} at byte {fh.tell() - len(data)}")
    return data


def read_cameras_binary(path):
    cameras = {}
    with open(path, "rb") as fh:
        (num,) = struct.unpack("<Q", _read_exact(fh, 8, path, "header"))
        for _ in range(num):
            cam_id, model_id, width, height = struct.unpack(
                "<iiQQ", _read_exact(fh, 24, path, "camera record"))
            model = CAMERA_MODEL_NAMES.get(model_id)
            if model is None:
                raise ColmapError(f"{path}: unknown camera model id {model_id} "
                                  f"at byte {fh.tell() - 24}")
            nparams = MODEL_NUM_PARAMS[model_id]
            params = struct.unpack(f"<{nparams}d",
                                   _read_exact(fh, 8 * nparams, path, "camera params"))
            cameras[cam_id] = (model, int(width), int(height), list(params))
    return cameras


def read_images_binary(path):
    images = []
    with open(path, "rb") as fh:
        (num,) = struct.unpack("<Q", _read_exact(fh, 8, path, "header"))
        for _ in range(num):
            image_id, qw, qx, qy, qz, tx, ty, tz, camera_id = struct.unpack(
                "<idddddddi", _read_exact(fh, 64, path, "image record"))
            name = bytearray()
            while True:
                ch = _read_exact(fh, 1, path, "image name")
                if ch == b"\x00":
                    break
                name.extend(ch)
            (npts,) = struct.unpack("<Q", _read_exact(fh, 8, path, "track header"))
            _read_exact(fh, 24 * npts, path, "2D observations")
            images.append((image_id, [qw, qx, qy, qz], [tx, ty, tz],
                           camera_id, name.decode()))
    images.sort(key=lambda rec: rec[0])
    return images


def read_points3d_binary(path):
    xyz, rgb = [], []
    with open(path, "rb") as fh:
        (num,) = struct.unpack("<Q", _read_exact(fh, 8, path, "header"))
        for _ in range(num):
            rec = struct.unpack("<QdddBBBd", _read_exact(fh, 43, path, "point record"))
            xyz.append(rec[1:4])
            rgb.append(rec[4:7])
            (track_len,) = struct.unpack("<Q", _read_exact(fh, 8, path, "track length"))
            _read_exact(fh, 8 * track_len, path, "track elements")
    if not xyz:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return (np.asarray(xyz, dtype=np.float64),
            np.asarray(rgb, dtype=np.float64) / 255.0)


# Writers: used by the synthetic-dataset exporter and the parser round-trip
# tests.  Text numbers are written with repr-level precision so text/binary
# reads agree to the last bit for values that round-trip through decimal.

def write_cameras_text(path, cameras: dict):
    with open(path, "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam_id in sorted(cameras):
            model, width, height, params = cameras[cam_id]
            p = " ".join(repr(float(x)) for x in params)
            fh.write(f"{cam_id} {model} {width} {height} {p}\n")


def write_cameras_binary(path, cameras: dict):
    name_to_id = {v: k for k, v in CAMERA_MODEL_NAMES.items()}
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(cameras)))
        for cam_id in sorted(cameras):
            model, width, height, params = cameras[cam_id]
            fh.write(struct.pack("<iiQQ", cam_id, name_to_id[model], width, height))
            fh.write(struct.pack(f"<{len(params)}d", *[float(x) for x in params]))


def write_images_text(path, images: list):
    with open(path, "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for image_id, qvec, tvec, camera_id, name in images:
            q = " ".join(repr(float(x)) for x in qvec)
            t = " ".join(repr(float(x)) for x in tvec)
            fh.write(f"{image_id} {q} {t} {camera_id} {name}\n\n")


def write_images_binary(path, images: list):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(images)))
        for image_id, qvec, tvec, camera_id, name in images:
            fh.write(struct.pack("<idddddddi", image_id, *[float(x) for x in qvec],
                                 *[float(x) for x in tvec], camera_id))
            fh.write(name.encode() + b"\x00")
            fh.write(struct.pack("<Q", 0))


def write_points3d_text(path, xyz: np.ndarray, rgb: np.ndarray):
    with open(path, "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        for i, (p, c) in enumerate(zip(xyz, rgb)):
            c8 = np.clip(np.round(np.asarray(c) * 255.0), 0, 255).astype(int)
            fh.write(f"{i + 1} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                     f"{c8[0]} {c8[1]} {c8[2]} 0.0\n")


def write_points3d_binary(path, xyz: np.ndarray, rgb: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(xyz)))
        for i, (p, c) in enumerate(zip(xyz, rgb)):
            c8 = np.clip(np.round(np.asarray(c) * 255.0), 0, 255).astype(int)
            fh.write(struct.pack("<QdddBBBd", i + 1, float(p[0]), float(p[1]),
                                 float(p[2]), int(c8[0]), int(c8[1]), int(c8[2]), 0.0))
            fh.write(struct.pack("<Q", 0))


def init_gaussians(bundle: ColmapBundle,
                   bounds: Optional[SceneBounds] = None) -> GaussianScene:
    """Seed one isotropic Gaussian per sparse point.

    The initial extent is the mean distance to the 3 nearest neighboring
    seeds; isolated points fall back to 1% of the scene diagonal.
    """
    n = len(bundle.points)
    if n == 0:
        raise ValueError(
            "no seed points; initialize randomly inside the scene bounds instead "
            "(GaussianScene with positions drawn from SceneBounds)")
    bounds = bounds or bundle.bounds()
    fallback = 0.01 * bounds.diagonal
    if n >= 4:
        tree = cKDTree(bundle.points)
        dists, _ = tree.query(bundle.points, k=4)
        mean_nn = dists[:, 1:].mean(axis=1)
    elif n >= 2:
        diff = bundle.points[:, None, :] - bundle.points[None, :, :]
        d = np.linalg.norm(diff, axis=-1)
        d[np.arange(n), np.arange(n)] = np.inf
        k = min(3, n - 1)
        mean_nn = np.sort(d, axis=1)[:, :k].mean(axis=1)
    else:
        mean_nn = np.full(n, fallback)
    mean_nn = np.where(mean_nn > 0, mean_nn, fallback)
    log_scales = np.log(mean_nn)[:, None].repeat(3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity = np.full(n, logit(0.1))
    colors = bundle.point_colors if bundle.point_colors.size else np.full((n, 3), 0.5)
    return GaussianScene(bundle.points.copy(), log_scales, rotations, opacity, colors)
