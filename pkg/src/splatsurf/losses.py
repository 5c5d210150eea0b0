"""Training losses: photometric fit, geometric regularizers, mask penalty.

Depth and normal maps enter as autodiff tensors; after the scalar loss is
backpropagated, their accumulated gradients are handed to the rasterizer's
analytic backward pass.  Ground-truth images are constants.
"""

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .scene import CameraView

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN or infinite; the iteration must abort."""


@dataclass
class GeoLossWeights:
    """Weights of the geometry regularizers inside the total objective."""
    consistency: float = 0.01
    multi_view_geometric: float = 0.2
    multi_view_photometric: float = 0.05
    textureless: float = 0.2
    flatten: float = 100.0

    def validate(self):
        for name in ("consistency", "multi_view_geometric",
                     "multi_view_photometric", "textureless", "flatten"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def intrinsics_inverse(K: np.ndarray) -> np.ndarray:
    fx, fy = K[0, 0], K[1, 1]
    cx, cy = K[0, 2], K[1, 2]
    return np.array([[1.0 / fx, 0.0, -cx / fx],
                     [0.0, 1.0 / fy, -cy / fy],
                     [0.0, 0.0, 1.0]])


@dataclass
class ViewPair:
    """A source view and a reference view with their relative pose.

    ``rotation`` and ``translation`` map source-camera points into the
    reference camera frame: X_ref = rotation @ X_src + translation.
    """
    source: CameraView
    reference: CameraView
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_views(cls, source: CameraView, reference: CameraView) -> "ViewPair":
        rotation = reference.rotation_c2w.T @ source.rotation_c2w
        translation = reference.rotation_c2w.T @ (
            source.camera_center - reference.camera_center)
        return cls(source, reference, rotation, translation)

    def swapped(self) -> "ViewPair":
        return ViewPair(self.reference, self.source, self.rotation.T,
                        -self.rotation.T @ self.translation)

    def validate(self, tol: float = 1e-9):
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > tol:
            raise ValueError("relative rotation is not orthonormal")
        # The stored pose must reproduce the composed world transform.
        probe = self.source.camera_center + self.source.rotation_c2w @ \
            np.array([0.31, -0.12, 0.77])
        direct = self.reference.world_to_camera(probe[None, :])[0]
        composed = self.rotation @ self.source.world_to_camera(
            probe[None, :])[0] + self.translation
        if np.abs(direct - composed).max() > tol:
            raise ValueError("relative pose does not compose the camera poses")


def select_view_pairs(views, count: int = 2, max_angle_deg: float = 60.0):
    """For each view, pick the nearest `count` views looking the same way.

    Candidates are ranked by camera-center distance; those whose viewing
    directions differ by `max_angle_deg` or more are skipped.  Returns a list
    of (source_index, reference_index) tuples.
    """
    centers = np.stack([v.camera_center for v in views])
    looks = np.stack([v.look_direction() for v in views])
    cos_limit = np.cos(np.radians(max_angle_deg))
    pairs = []
    for s in range(len(views)):
        dist = np.linalg.norm(centers - centers[s], axis=1)
        order = np.lexsort((np.arange(len(views)), dist))
        taken = 0
        for r in order:
            if r == s or taken >= count:
                continue
            if looks[s] @ looks[r] > cos_limit:
                pairs.append((s, int(r)))
                taken += 1
    return pairs


def homography_matrix(pair: ViewPair, normal_cam: np.ndarray,
                      distance: float) -> np.ndarray:
    """Pixel mapping induced by a plane seen in the source view.

    `normal_cam` is the plane's unit normal in the source camera frame,
    oriented away from the camera (positive dot with viewing rays), and
    `distance` is the positive ray-side plane distance, so points on the
    plane satisfy normal_cam . X = distance.
    """
    if distance <= 0:
        raise ValueError("plane distance must be positive")
    inner = pair.rotation + np.outer(pair.translation, normal_cam) / distance
    return pair.reference.intrinsics @ inner @ intrinsics_inverse(
        pair.source.intrinsics)


def transfer_plane(pair: ViewPair, normal_cam: np.ndarray, distance: float):
    """Express a source-frame plane (normal, distance) in the reference frame."""
    normal_ref = pair.rotation @ normal_cam
    return normal_ref, float(distance + normal_ref @ pair.translation)


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    hom = np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)
    mapped = hom @ H.T
    return mapped[..., :2] / mapped[..., 2:3]


@dataclass
class MvGeoStats:
    source_valid: int = 0
    out_of_view: int = 0
    reference_invalid: int = 0
    degenerate: int = 0
    filtered: int = 0
    used: int = 0

    @property
    def filtered_fraction(self) -> float:
        candidates = self.used + self.filtered
        return self.filtered / candidates if candidates else 0.0


def _homogeneous(uv: Tensor) -> Tensor:
    ones = np.ones((uv.shape[0], 1))
    return ad.concatenate([uv, as_tensor(ones)], axis=1)


def _project_to_pixels(points_cam: Tensor, K: np.ndarray, eps: float = 1e-9):
    """Perspective-divide camera points into pixel coordinates.

    Returns (uv tensor, in_front bool array); behind-camera rows are
    replaced by a harmless constant so no non-finite values propagate.
    """
    hom = points_cam @ as_tensor(K.T)
    z = hom[:, 2]
    in_front = z.value > eps
    z_safe = ad.where(in_front, z, as_tensor(np.ones_like(z.value)))
    uv = hom[:, :2] / z_safe.reshape(-1, 1)
    return uv, in_front


def mv_geometric_loss(pair: ViewPair, depth_s: Tensor, normal_s: Tensor,
                      valid_s: np.ndarray, depth_r: Tensor, normal_r: Tensor,
                      valid_r: np.ndarray, threshold: float = 1.0):
    """Forward-backward reprojection consistency between two views.

    Each valid source pixel is projected into the reference view using its
    own rendered depth, then mapped back through the reference view's
    rendered local plane at the nearest reference pixel.  The loss is the
    mean L1 round-trip error in pixels; round trips longer than `threshold`
    pixels are treated as occlusions and excluded.  Returns (loss, stats).
    """
    stats = MvGeoStats()
    rows, cols = np.nonzero(valid_s)
    stats.source_valid = len(rows)
    if len(rows) == 0:
        logger.warning("multi-view geometric loss: no valid source pixels")
        return as_tensor(0.0), stats

    src, ref = pair.source, pair.reference
    uv = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    rays = np.concatenate([uv, np.ones((len(rows), 1))], axis=1) \
        @ intrinsics_inverse(src.intrinsics).T

    d_s = depth_s[rows, cols]
    points_ref = (as_tensor(rays) * d_s.reshape(-1, 1)) @ \
        as_tensor(pair.rotation.T) + as_tensor(pair.translation)
    uv_ref, front = _project_to_pixels(points_ref, ref.intrinsics)

    cols_q = np.floor(uv_ref.value[:, 0]).astype(np.int64)
    rows_q = np.floor(uv_ref.value[:, 1]).astype(np.int64)
    inside = front & (cols_q >= 0) & (cols_q < ref.width) & \
        (rows_q >= 0) & (rows_q < ref.height)
    cols_qc = np.clip(cols_q, 0, ref.width - 1)
    rows_qc = np.clip(rows_q, 0, ref.height - 1)
    ref_ok = inside & valid_r[rows_qc, cols_qc]
    stats.out_of_view = int((~inside).sum())
    stats.reference_invalid = int((inside & ~ref_ok).sum())

    # Reference-side plane at the looked-up pixel: distance along its own
    # center ray times the normal gives the plane offset.
    n_cam_r = normal_r[rows_qc, cols_qc] @ as_tensor(ref.rotation_c2w)
    d_r = depth_r[rows_qc, cols_qc]
    center_rays_r = np.stack([cols_qc + 0.5, rows_qc + 0.5,
                              np.ones(len(rows_qc))], axis=-1) \
        @ intrinsics_inverse(ref.intrinsics).T
    plane_off = d_r * (n_cam_r * center_rays_r).sum(axis=1)
    plane_ok = np.abs(plane_off.value) > 1e-9
    plane_safe = ad.where(plane_ok, plane_off,
                          as_tensor(np.ones_like(plane_off.value)))

    rays_back = _homogeneous(uv_ref) @ \
        as_tensor(intrinsics_inverse(ref.intrinsics).T)
    scale = (n_cam_r * rays_back).sum(axis=1) / plane_safe
    rev = pair.swapped()
    points_src = rays_back @ as_tensor(rev.rotation.T) + \
        as_tensor(rev.translation) * scale.reshape(-1, 1)
    uv_back, back_front = _project_to_pixels(points_src, src.intrinsics)

    err = (uv_back - as_tensor(uv)).abs().sum(axis=1)
    candidate = ref_ok & plane_ok & back_front & np.isfinite(err.value)
    include = candidate & (err.value <= threshold)
    stats.degenerate = int((ref_ok & ~plane_ok).sum())
    stats.filtered = int((candidate & ~include).sum())
    stats.used = int(include.sum())
    if stats.used == 0:
        logger.warning("multi-view geometric loss: empty overlap "
                       "(all %d candidates rejected)", stats.source_valid)
        return as_tensor(0.0), stats
    return err[include].mean(), stats


@dataclass
class ZnccStats:
    candidates: int = 0
    out_of_view: int = 0
    masked: int = 0
    low_variance: int = 0
    used: int = 0


def mv_photometric_loss(pair: ViewPair, gray_s: np.ndarray, gray_r: np.ndarray,
                        depth_s: Tensor, normal_s: Tensor, valid_s: np.ndarray,
                        mask_s: np.ndarray = None, mask_r: np.ndarray = None,
                        patch: int = 7, floor: float = 1e-6):
    """Patch correlation between a view and a reference after plane warping.

    A square patch around each valid source pixel is warped into the
    reference view by the pixel's rendered local plane and compared by
    zero-mean normalized cross-correlation; the loss is mean |1 - ZNCC|.
    Patches that leave the reference image, have near-zero variance, or fall
    in transient regions (mean mask < 0.5 in either view) are skipped.
    Gradients flow to the source depth/normal through the warp coordinates.
    Returns (loss, stats).
    """
    stats = ZnccStats()
    half = patch // 2
    h, w = gray_s.shape
    interior = valid_s.copy()
    interior[:half], interior[-half:] = False, False
    interior[:, :half], interior[:, -half:] = False, False
    rows, cols = np.nonzero(interior)
    stats.candidates = len(rows)
    if len(rows) == 0:
        return as_tensor(0.0), stats

    src, ref = pair.source, pair.reference
    n = len(rows)
    k2 = patch * patch
    dv, du = np.mgrid[-half:half + 1, -half:half + 1]
    offsets = np.stack([du.ravel(), dv.ravel()], axis=-1)

    uv_center = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    uv_patch = uv_center[:, None, :] + offsets[None, :, :]
    hom = np.concatenate([uv_patch, np.ones((n, k2, 1))], axis=2)
    k_inv_t = intrinsics_inverse(src.intrinsics).T
    rays_patch = hom @ k_inv_t
    rays_center = rays_patch[:, k2 // 2]

    n_cam = normal_s[rows, cols] @ as_tensor(src.rotation_c2w)
    d_s = depth_s[rows, cols]
    plane_off = d_s * (n_cam * rays_center).sum(axis=1)
    plane_ok = np.abs(plane_off.value) > 1e-9
    plane_safe = ad.where(plane_ok, plane_off,
                          as_tensor(np.ones_like(plane_off.value)))

    scale = (n_cam.reshape(n, 1, 3) * rays_patch).sum(axis=2) / \
        plane_safe.reshape(n, 1)
    points_ref = as_tensor(rays_patch) @ as_tensor(pair.rotation.T) + \
        as_tensor(pair.translation) * scale.reshape(n, k2, 1)
    hom_ref = points_ref @ as_tensor(ref.intrinsics.T)
    z = hom_ref[:, :, 2]
    front = z.value > 1e-9
    z_safe = ad.where(front, z, as_tensor(np.ones_like(z.value)))
    uv_ref = hom_ref[:, :, :2] / z_safe.reshape(n, k2, 1)

    u, v = uv_ref.value[..., 0], uv_ref.value[..., 1]
    inside = front & (u >= 0.5) & (u <= ref.width - 0.5) & \
        (v >= 0.5) & (v <= ref.height - 0.5)
    geom_ok = plane_ok & inside.all(axis=1)

    coords = uv_ref - as_tensor(np.array(0.5))
    coords_safe = ad.where(geom_ok[:, None, None], coords,
                           as_tensor(np.zeros_like(coords.value)))
    patch_ref = ad.bilinear_sample(gray_r, coords_safe)

    patch_src = gray_s[np.clip(rows[:, None] + offsets[None, :, 1], 0, h - 1),
                       np.clip(cols[:, None] + offsets[None, :, 0], 0, w - 1)]
    mean_src = patch_src.mean(axis=1, keepdims=True)
    dev_src = patch_src - mean_src
    var_src = (dev_src ** 2).mean(axis=1)
    std_src = np.sqrt(var_src)

    mean_ref = patch_ref.mean(axis=1, keepdims=True)
    dev_ref = patch_ref - mean_ref
    var_ref = (dev_ref * dev_ref).mean(axis=1)
    std_ref = ad.maximum(var_ref, as_tensor(np.full(n, 1e-24))).sqrt()

    cov = (dev_ref * as_tensor(dev_src)).mean(axis=1)
    denom = ad.maximum(std_ref * as_tensor(std_src),
                       as_tensor(np.full(n, floor)))
    contrib = (1.0 - cov / denom).abs()

    texture_ok = (var_src > 1e-12) & (var_ref.value > 1e-12)
    mask_ok = np.ones(n, dtype=bool)
    if mask_s is not None:
        patch_mask = mask_s[
            np.clip(rows[:, None] + offsets[None, :, 1], 0, h - 1),
            np.clip(cols[:, None] + offsets[None, :, 0], 0, w - 1)]
        mask_ok &= patch_mask.mean(axis=1) >= 0.5
    if mask_r is not None:
        sampled = ad.bilinear_sample(mask_r, Tensor(coords_safe.value)).value
        mask_ok &= sampled.mean(axis=1) >= 0.5

    include = geom_ok & texture_ok & mask_ok & np.isfinite(contrib.value)
    stats.out_of_view = int((~geom_ok).sum())
    stats.masked = int((geom_ok & ~mask_ok).sum())
    stats.low_variance = int((geom_ok & mask_ok & ~texture_ok).sum())
    stats.used = int(include.sum())
    if stats.used == 0:
        return as_tensor(0.0), stats
    return contrib[include].mean(), stats


def _flat_region_weight(gray: np.ndarray) -> np.ndarray:
    """(1 - g)^5 interior weight from the normalized image-gradient magnitude."""
    gx = (gray[1:-1, 2:] - gray[1:-1, :-2]) * 0.5
    gy = (gray[2:, 1:-1] - gray[:-2, 1:-1]) * 0.5
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return (1.0 - mag) ** 5


def _neighbors_valid(valid: np.ndarray) -> np.ndarray:
    return (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
            & valid[2:, 1:-1] & valid[:-2, 1:-1])


def textureless_loss(gray: np.ndarray, depth: Tensor,
                     valid: np.ndarray) -> Tensor:
    """Damp depth gradients where the image shows no texture.

    Mean over valid interior pixels of (1 - g)^5 * |grad D|_1, with g the
    max-normalized image-gradient magnitude; pixels whose central-difference
    neighbors have invalid depth are excluded.
    """
    weight = _flat_region_weight(gray)
    gate = _neighbors_valid(valid)
    if not gate.any():
        return as_tensor(0.0)
    dx = (depth[1:-1, 2:] - depth[1:-1, :-2]) * 0.5
    dy = (depth[2:, 1:-1] - depth[:-2, 1:-1]) * 0.5
    grad_l1 = dx.abs() + dy.abs()
    return (grad_l1 * as_tensor(weight * gate)).sum() / float(gate.sum())


def depth_normal_loss(depth: Tensor, normal_world: Tensor, valid: np.ndarray,
                      gray: np.ndarray, view: CameraView) -> Tensor:
    """Consistency between rendered normals and normals implied by depth.

    Four neighboring pixels are back-projected to camera space; the cross
    product (left - right) x (up - down), oriented to face the camera side
    of the surface, is compared to the rendered normal (rotated into the
    camera frame) by an L1 distance weighted toward textureless regions.
    """
    gate = _neighbors_valid(valid)
    if not gate.any():
        return as_tensor(0.0)
    rays = view.camera_rays()
    points = depth.reshape(*depth.shape, 1) * as_tensor(rays)
    e1 = points[1:-1, :-2] - points[1:-1, 2:]
    e2 = points[:-2, 1:-1] - points[2:, 1:-1]
    cross = ad.stack(
        [e1[:, :, 1] * e2[:, :, 2] - e1[:, :, 2] * e2[:, :, 1],
         e1[:, :, 2] * e2[:, :, 0] - e1[:, :, 0] * e2[:, :, 2],
         e1[:, :, 0] * e2[:, :, 1] - e1[:, :, 1] * e2[:, :, 0]], axis=-1)
    norm_sq = (cross * cross).sum(axis=2, keepdims=True)
    norm_ok = norm_sq.value[:, :, 0] > 1e-24
    norm = ad.maximum(norm_sq, as_tensor(np.full_like(norm_sq.value, 1e-24)))
    unit = cross / norm.sqrt()

    center = points.value[1:-1, 1:-1]
    toward = (cross.value * center).sum(axis=2)
    sign = np.where(toward < 0, -1.0, 1.0)
    unit = unit * as_tensor(sign[:, :, None])

    rendered_cam = (normal_world @ as_tensor(view.rotation_c2w))[1:-1, 1:-1]
    l1 = (unit - rendered_cam).abs().sum(axis=2)
    weight = _flat_region_weight(gray) * (gate & norm_ok)
    count = int((gate & norm_ok).sum())
    if count == 0:
        return as_tensor(0.0)
    return (l1 * as_tensor(weight)).sum() / count


def flatten_loss(log_scales: Tensor) -> Tensor:
    """Mean smallest scale over all Gaussians; pushes primitives flat."""
    scales = log_scales.exp()
    smallest = ad.minimum(ad.minimum(scales[:, 0], scales[:, 1]),
                          scales[:, 2])
    return smallest.mean()


@lru_cache(maxsize=None)
def _blur_matrix(n: int, window: int, sigma: float) -> np.ndarray:
    """Banded matrix applying a zero-padded 1D Gaussian window."""
    taps = np.arange(window) - window // 2
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    mat = np.zeros((n, n))
    for i in range(n):
        for k, t in enumerate(taps):
            j = i + t
            if 0 <= j < n:
                mat[i, j] += kernel[k]
    return mat


def _blur(channel: Tensor, window: int, sigma: float) -> Tensor:
    h, w = channel.shape
    bh = as_tensor(_blur_matrix(h, window, sigma))
    bw = as_tensor(_blur_matrix(w, window, sigma).T)
    return bh @ channel @ bw


def ssim_mean(x, y, window: int = 11, sigma: float = 1.5,
              k1: float = 0.01, k2: float = 0.03) -> Tensor:
    """Mean structural similarity over all pixels and channels.

    Gaussian-window statistics with zero padding at the borders; unit data
    range.  Accepts (H, W) or (H, W, C) tensors.
    """
    x, y = as_tensor(x), as_tensor(y)
    c1, c2 = k1 ** 2, k2 ** 2
    channels = 1 if x.ndim == 2 else x.shape[2]
    means = []
    for c in range(channels):
        xc = x if x.ndim == 2 else x[:, :, c]
        yc = y if y.ndim == 2 else y[:, :, c]
        mu_x = _blur(xc, window, sigma)
        mu_y = _blur(yc, window, sigma)
        var_x = _blur(xc * xc, window, sigma) - mu_x * mu_x
        var_y = _blur(yc * yc, window, sigma) - mu_y * mu_y
        cov = _blur(xc * yc, window, sigma) - mu_x * mu_y
        score = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / \
            ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
        means.append(score.mean())
    return ad.stack(means).mean()


def dssim(x, y, window: int = 11, sigma: float = 1.5) -> Tensor:
    """Structural dissimilarity (1 - SSIM) / 2, in [0, 1]."""
    return (1.0 - ssim_mean(x, y, window=window, sigma=sigma)) * 0.5


def masked_rgb_loss(rendered, transformed, gt: np.ndarray, mask,
                    structural_weight: float = 0.25) -> Tensor:
    """Photometric fit with transient masking.

    L1 compares the appearance-transformed render against ground truth;
    the structural term compares the raw render, both under the transient
    mask.  `structural_weight` balances the two.
    """
    rendered, transformed, mask = (as_tensor(rendered), as_tensor(transformed),
                                   as_tensor(mask))
    gt = np.asarray(gt, dtype=np.float64)
    m3 = mask.reshape(*mask.shape, 1)
    l1 = (m3 * transformed - m3 * as_tensor(gt)).abs().mean()
    structural = dssim(m3 * rendered, m3 * as_tensor(gt))
    return (1.0 - structural_weight) * l1 + structural_weight * structural


def mask_reg_loss(mask, weight: float = 0.8) -> Tensor:
    """Pulls the transient mask toward all-static (1)."""
    return weight * (1.0 - as_tensor(mask)).mean()


_TERM_WEIGHTS = {
    "rgb": None, "mask_reg": None,
    "flatten": "flatten",
    "consistency": "consistency",
    "multi_view_geometric": "multi_view_geometric",
    "multi_view_photometric": "multi_view_photometric",
    "textureless": "textureless",
}


def total_loss(weights: GeoLossWeights = None, **terms) -> Tensor:
    """Weighted sum of named loss terms.

    Accepts any subset of: rgb, mask_reg, flatten, consistency,
    multi_view_geometric, multi_view_photometric, textureless.  Raises
    NonFiniteLossError naming the first non-finite term.
    """
    weights = weights or GeoLossWeights()
    unknown = set(terms) - set(_TERM_WEIGHTS)
    if unknown:
        raise TypeError(f"unknown loss terms: {sorted(unknown)}")
    total = as_tensor(0.0)
    for name, weight_attr in _TERM_WEIGHTS.items():
        term = terms.get(name)
        if term is None:
            continue
        term = as_tensor(term)
        if not np.isfinite(term.value):
            raise NonFiniteLossError(f"loss term '{name}' is non-finite")
        factor = 1.0 if weight_attr is None else getattr(weights, weight_attr)
        total = total + factor * term
    return total


class LossLog:
    """Appends one CSV row of loss values per training iteration."""

    def __init__(self, path, terms):
        self.terms = list(terms)
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(["iteration", *self.terms, "total"])

    def append(self, iteration: int, values: dict, total: float):
        row = [iteration] + [values.get(t, 0.0) for t in self.terms] + [total]
        self._writer.writerow([f"{v:.10g}" if isinstance(v, float) else v
                               for v in row])
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
