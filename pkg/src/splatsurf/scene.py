"""Scene representation shared by every stage of the pipeline.

A scene is a struct-of-arrays collection of flattened ("planar") Gaussian
primitives plus the cameras and images that observe it.  Scales live in log
space and opacities in logit space so the optimizer can take unconstrained
steps; quaternions are kept unit-norm by renormalizing after each step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Optional, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"TSPL"
CHECKPOINT_VERSION = 1

# Per-Gaussian record: position(3) log_scale(3) rotation(4) opacity_logit(1)
# color(3), all little-endian f64.
_RECORD_FIELDS = 14
_RECORD_BYTES = _RECORD_FIELDS * 8


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for an (N, 4) array of (w, x, y, z) quaternions.

    Quaternions are normalized internally, so callers may pass raw optimizer
    state.  Returns (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None]
    n = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / n).T
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


@dataclass
class SceneBounds:
    """Axis-aligned world box; the ground plane is assumed parallel to xy."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64).reshape(3)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(self.min < self.max):
            raise ValueError(f"degenerate bounds: min={self.min} max={self.max}")

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.min) & (points <= self.max), axis=-1)


@dataclass
class CameraView:
    """Pinhole camera with camera-to-world pose.

    ``intrinsics`` maps camera coordinates to this view's own pixel grid; a
    sub-image of a larger frame records where it sits in the parent via
    ``crop_origin`` so that rendering it reproduces the parent's pixels
    bit-for-bit.  The principal point is therefore in general noncentral.
    """

    intrinsics: np.ndarray
    rotation_c2w: np.ndarray
    camera_center: np.ndarray
    width: int
    height: int
    image_path: str = ""
    embedding_id: int = 0
    crop_origin: tuple[int, int] = (0, 0)
    view_id: int = -1

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.rotation_c2w = np.asarray(self.rotation_c2w, dtype=np.float64).reshape(3, 3)
        self.camera_center = np.asarray(self.camera_center, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        R = self.rotation_c2w
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err >= 1e-9:
            raise ValueError(f"rotation_c2w is not orthonormal (|RR^T - I|={err:.3e})")
        K = self.intrinsics
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("intrinsics must be upper triangular with K[2,2]=1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def principal_point(self) -> tuple[float, float]:
        return float(self.intrinsics[0, 2]), float(self.intrinsics[1, 2])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.camera_center) @ self.rotation_c2w

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_c2w.T + self.camera_center

    def pixel_rays(self) -> np.ndarray:
        """World-frame ray directions K^-1 p~ for every pixel, shape (H, W, 3).

        Rays are unnormalized with camera-frame z = 1, so the ray parameter of
        an intersection equals its camera z-depth.  Pixel centers sit at
        (col + 0.5, row + 0.5) in this view's own grid; ``crop_origin`` shifts
        them into the parent frame so crops and full frames share rays.
        """
        xs = np.arange(self.width, dtype=np.float64) + 0.5 + self.crop_origin[0]
        ys = np.arange(self.height, dtype=np.float64) + 0.5 + self.crop_origin[1]
        cx, cy = self.principal_point
        cx_abs = cx + self.crop_origin[0]
        cy_abs = cy + self.crop_origin[1]
        dx = (xs[None, :] - cx_abs) / self.fx
        dy = (ys[:, None] - cy_abs) / self.fy
        dirs_cam = np.stack(
            [np.broadcast_to(dx, (self.height, self.width)),
             np.broadcast_to(dy, (self.height, self.width)),
             np.ones((self.height, self.width))], axis=-1)
        return dirs_cam @ self.rotation_c2w.T

    def camera_rays(self) -> np.ndarray:
        """Camera-frame rays with z = 1, in this view's own pixel grid.

        Back-projection of a depth map is depth[..., None] * camera_rays().
        """
        xs = np.arange(self.width, dtype=np.float64) + 0.5
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        cx, cy = self.principal_point
        dx = (xs[None, :] - cx) / self.fx
        dy = (ys[:, None] - cy) / self.fy
        return np.stack(
            [np.broadcast_to(dx, (self.height, self.width)),
             np.broadcast_to(dy, (self.height, self.width)),
             np.ones((self.height, self.width))], axis=-1)

    def downsampled(self, factor: int) -> "CameraView":
        """The same physical camera at 1/factor resolution."""
        if factor == 1:
            return self
        if self.width % factor or self.height % factor:
            raise ValueError(f"dimensions {self.width}x{self.height} not divisible by {factor}")
        K = self.intrinsics.copy()
        K[0] /= factor
        K[1] /= factor
        return replace(self, intrinsics=K, width=self.width // factor,
                       height=self.height // factor)

    def look_direction(self) -> np.ndarray:
        """World-frame optical axis (camera +z)."""
        return self.rotation_c2w[:, 2].copy()


@dataclass
class TrainingImage:
    """Ground-truth pixels paired with the view that captured them."""

    pixels: np.ndarray
    view: CameraView
    downsample_level: int = 1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got {self.pixels.shape}")
        if self.pixels.shape[:2] != (self.view.height, self.view.width):
            raise ValueError("pixel dimensions do not match the view")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    def downsampled(self, factor: int) -> "TrainingImage":
        """Average-pool the image and rescale the camera to match."""
        if factor == 1:
            return self
        h, w = self.pixels.shape[:2]
        if h % factor or w % factor:
            raise ValueError(f"dimensions {w}x{h} not divisible by {factor}")
        p = self.pixels.reshape(h // factor, factor, w // factor, factor, 3)
        return TrainingImage(pixels=p.mean(axis=(1, 3)),
                             view=self.view.downsampled(factor),
                             downsample_level=self.downsample_level * factor)


class GaussianScene:
    """Struct-of-arrays container for flattened Gaussian primitives."""

    def __init__(self, positions, log_scales, rotations, opacity_logits, colors):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "GaussianScene":
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros((0, 4)), np.zeros(0), z)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.positions.copy(), self.log_scales.copy(),
                             self.rotations.copy(), self.opacity_logits.copy(),
                             self.colors.copy())

    def select(self, indices) -> "GaussianScene":
        return GaussianScene(self.positions[indices], self.log_scales[indices],
                             self.rotations[indices], self.opacity_logits[indices],
                             self.colors[indices])

    @staticmethod
    def concatenate(scenes: Sequence["GaussianScene"]) -> "GaussianScene":
        if not scenes:
            return GaussianScene.empty()
        return GaussianScene(
            np.concatenate([s.positions for s in scenes]),
            np.concatenate([s.log_scales for s in scenes]),
            np.concatenate([s.rotations for s in scenes]),
            np.concatenate([s.opacity_logits for s in scenes]),
            np.concatenate([s.colors for s in scenes]))

    # Activated views of the raw parameters.

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations)

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.divide(self.rotations, norms, out=self.rotations)

    def validate(self):
        scales = self.scales
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("scales must be finite and strictly positive")
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(qn - 1.0) >= 1e-6):
            raise ValueError("quaternions drifted from unit norm; renormalize first")
        op = self.opacities
        if np.any(op <= 0) or np.any(op >= 1):
            raise ValueError("activated opacities must lie strictly inside (0, 1)")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.colors))):
            raise ValueError("positions and colors must be finite")

    def covariance(self) -> np.ndarray:
        """World-frame covariances R S^2 R^T, shape (N, 3, 3)."""
        R = self.rotation_matrices()
        s2 = self.scales ** 2
        return (R * s2[:, None, :]) @ np.swapaxes(R, 1, 2)

    def min_scale_axes(self) -> np.ndarray:
        """Index of the smallest scale per Gaussian; ties pick the lowest axis."""
        return np.argmin(self.log_scales, axis=1)

    def plane_normals(self, camera_center: Optional[np.ndarray] = None) -> np.ndarray:
        """Unit plane normals: the rotated axis of minimum scale, shape (N, 3).

        With a ``camera_center`` the sign is chosen per Gaussian so the normal
        has non-negative dot product with the viewing direction (camera toward
        Gaussian); the plane distance dot(n, position - center) then comes out
        non-negative.
        """
        R = self.rotation_matrices()
        axes = self.min_scale_axes()
        normals = R[np.arange(len(self)), :, axes]
        if camera_center is not None:
            towards = self.positions - np.asarray(camera_center, dtype=np.float64)
            flip = (normals * towards).sum(axis=1) < 0
            normals = np.where(flip[:, None], -normals, normals)
        return normals

    def bounds(self, margin: float = 0.0) -> SceneBounds:
        if len(self) == 0:
            raise ValueError("cannot compute bounds of an empty scene")
        lo = self.positions.min(axis=0) - margin
        hi = self.positions.max(axis=0) + margin
        pad = np.where(hi - lo <= 0, 1e-6, 0.0)
        return SceneBounds(lo - pad, hi + pad)

    # Checkpoint format: magic "TSPL", u32 version, u64 count, fixed-width
    # little-endian per-Gaussian records, then zero or more tagged sections
    # (4-byte tag, u64 payload length, payload).  Readers skip unknown tags.

    def save(self, path, sections: Optional[dict[bytes, bytes]] = None):
        with open(path, "wb") as fh:
            self._write(fh, sections or {})

    def _write(self, fh: BinaryIO, sections: dict[bytes, bytes]):
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(self)))
        records = np.concatenate(
            [self.positions, self.log_scales, self.rotations,
             self.opacity_logits[:, None], self.colors], axis=1)
        fh.write(records.astype("<f8").tobytes())
        for tag, payload in sections.items():
            if len(tag) != 4:
                raise ValueError(f"section tag must be 4 bytes, got {tag!r}")
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)

    @classmethod
    def load(cls, path) -> tuple["GaussianScene", dict[bytes, bytes]]:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"not a scene checkpoint (magic={magic!r})")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            (count,) = struct.unpack("<Q", fh.read(8))
            raw = fh.read(count * _RECORD_BYTES)
            if len(raw) != count * _RECORD_BYTES:
                raise ValueError("truncated checkpoint: gaussian records incomplete")
            records = np.frombuffer(raw, dtype="<f8").reshape(count, _RECORD_FIELDS)
            scene = cls(records[:, 0:3], records[:, 3:6], records[:, 6:10],
                        records[:, 10], records[:, 11:14])
            sections: dict[bytes, bytes] = {}
            while True:
                tag = fh.read(4)
                if not tag:
                    break
                if len(tag) != 4:
                    raise ValueError("truncated checkpoint: dangling section tag")
                (length,) = struct.unpack("<Q", fh.read(8))
                payload = fh.read(length)
                if len(payload) != length:
                    raise ValueError(f"truncated checkpoint: section {tag!r} incomplete")
                sections[tag] = payload
        return scene, sections

    def export_ply(self, path):
        """ASCII point-cloud dump (positions + 8-bit colors) for inspection."""
        colors = np.clip(self.colors, 0.0, 1.0)
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(self)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
            fh.write("end_header\n")
            rgb8 = np.clip(np.round(colors * 255.0), 0, 255).astype(int)
            for p, c in zip(self.positions, rgb8):
                fh.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {c[0]} {c[1]} {c[2]}\n")
