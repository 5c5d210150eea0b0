"""Image and geometry quality metrics plus evaluation helpers."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .losses import ssim_mean
from .raster import render

PSNR_CAP = 99.0
PERCENTILES = (50, 75, 90, 95, 99)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    Identical inputs (and anything past the cap) report the 99 dB sentinel.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with an 11x11 Gaussian window."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(ssim_mean(a, b).value)


@dataclass
class GeoReport:
    """Mesh-to-cloud distance summary in world units.

    `as_dict` additionally reports MAE/RMSE scaled by 100, the display
    convention used in the summary tables.
    """

    mae: float
    rmse: float
    count: int
    percentiles: dict = field(default_factory=dict)

    def validate(self):
        if not 0.0 <= self.mae <= self.rmse + 1e-12:
            raise ValueError("expected RMSE >= MAE >= 0")
        if self.count <= 0:
            raise ValueError("sample count must be positive")

    def as_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mae_x100": 100.0 * self.mae,
            "rmse_x100": 100.0 * self.rmse,
            "count": self.count,
            "percentiles": {str(p): v for p, v in self.percentiles.items()},
        }


def cloud_mean_spacing(points: np.ndarray) -> float:
    """Mean nearest-neighbor distance within a point cloud."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 2:
        raise ValueError("reference cloud needs at least two 3D points")
    dist, _ = cKDTree(points).query(points, k=2)
    return float(dist[:, 1].mean())


def nearest_distances(points: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    """Distance from each query point to its nearest cloud point."""
    dist, _ = cKDTree(np.asarray(cloud, dtype=np.float64)).query(
        np.asarray(points, dtype=np.float64))
    return dist


def sample_mesh_points(mesh, count: int, rng) -> np.ndarray:
    """Sample points on the surface, uniform per unit area."""
    areas = 0.5 * np.linalg.norm(mesh.face_normals(), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has no surface area")
    tri = rng.choice(len(areas), size=count, p=areas / total)
    corners = mesh.vertices[mesh.triangles[tri]]
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    return (corners[:, 0]
            + u[:, None] * (corners[:, 1] - corners[:, 0])
            + v[:, None] * (corners[:, 2] - corners[:, 0]))


def mesh_accuracy(mesh, cloud: np.ndarray, density: float = 10.0,
                  seed: int = 0) -> GeoReport:
    """One-directional mesh-to-cloud distance statistics.

    The mesh is sampled uniformly by area, `density` points per square of
    the cloud's mean point spacing; each sample is scored by its distance
    to the nearest reference point.
    """
    if mesh.is_empty:
        raise ValueError("mesh is empty")
    cloud = np.asarray(cloud, dtype=np.float64)
    spacing = cloud_mean_spacing(cloud)
    areas = 0.5 * np.linalg.norm(mesh.face_normals(), axis=1)
    count = max(int(math.ceil(density * areas.sum() / spacing ** 2)), 1)
    samples = sample_mesh_points(mesh, count, np.random.default_rng(seed))
    dist = nearest_distances(samples, cloud)
    report = GeoReport(
        mae=float(dist.mean()),
        rmse=float(np.sqrt(np.mean(dist ** 2))),
        count=count,
        percentiles={p: float(v) for p, v in
                     zip(PERCENTILES, np.percentile(dist, PERCENTILES))})
    report.validate()
    return report


def held_out_split(count: int, period: int = 8):
    """Modular train/test split: every `period`-th view is held out."""
    if period < 2:
        raise ValueError("period must be at least 2")
    idx = np.arange(count)
    return idx[idx % period != 0], idx[idx % period == 0]


def evaluate_views(scene, images, raster_config=None):
    """Per-view PSNR/SSIM of raw renders against ground-truth images."""
    rows = []
    for i, image in enumerate(images):
        out = render(scene, image.view, raster_config)
        rendered = np.clip(out.color, 0.0, 1.0)
        vid = image.view.view_id if image.view.view_id >= 0 else i
        rows.append({"view_id": int(vid),
                     "psnr": psnr(rendered, image.pixels),
                     "ssim": ssim(rendered, image.pixels)})
    return rows
