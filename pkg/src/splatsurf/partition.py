"""Binary-tree scene partitioning with visibility-based image assignment.

The ground-plane footprint of the coarse scene is split recursively at the
midpoint of the longer axis until each cell is covered by few enough images
or becomes shorter than a minimum side length.  Each cell then collects the
images that see it (camera inside the grown rectangle, or the cell's box
filling enough of the frame) and the Gaussians it owns (inside the box, or
blended with non-negligible weight into one of the cell's images).
"""

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .raster import RasterConfig, gaussian_weight_totals
from .scene import CameraView, GaussianScene

logger = logging.getLogger(__name__)


class PartitionError(ValueError):
    """The scene cannot be partitioned under the current configuration."""


@dataclass
class PartitionConfig:
    max_images: int = 500       # stop splitting once a cell has this few
    min_length: float = 3.0     # never split below this side length
    expansion_ratio: float = 0.1
    area_threshold: float = 0.25
    keep_min_images: int = 8    # drop leaves seen by fewer images
    weight_floor: float = 1e-3  # blending weight that counts as visible

    def validate(self) -> "PartitionConfig":
        if self.max_images < 1:
            raise ValueError("max_images must be at least 1")
        if self.min_length <= 0:
            raise ValueError("min_length must be positive")
        if not 0.0 < self.expansion_ratio < 1.0:
            raise ValueError("expansion_ratio must lie in (0, 1)")
        if not 0.0 < self.area_threshold <= 1.0:
            raise ValueError("area_threshold must lie in (0, 1]")
        if self.keep_min_images < 1:
            raise ValueError("keep_min_images must be at least 1")
        if self.weight_floor < 0:
            raise ValueError("weight_floor must be non-negative")
        return self


@dataclass
class PartitionCell:
    """One leaf of the partition tree.

    Rectangles are (x0, x1, y0, y1) in world ground-plane coordinates; the
    expanded rectangle strictly contains the base one.  ``z_range`` is None
    when the cell contains no Gaussians.
    """
    id: int
    rect: tuple
    expanded: tuple
    z_range: Optional[tuple]
    image_ids: np.ndarray
    gaussian_ids: np.ndarray
    depth: int

    @property
    def extents(self) -> tuple:
        return self.rect[1] - self.rect[0], self.rect[3] - self.rect[2]

    def box_corners(self) -> np.ndarray:
        """The 8 corners of the expanded box, indexed 4*ix + 2*iy + iz."""
        if self.z_range is None:
            raise ValueError("cell contains no Gaussians, box is undefined")
        return _box_corners(self.expanded, self.z_range)


def expand_rect(rect, ratio: float) -> tuple:
    """Grow a rectangle outward by ratio of its extent on every side."""
    x0, x1, y0, y1 = rect
    # degenerate axes still grow a hair so containment stays strict
    gx = max((x1 - x0) * ratio, 1e-12)
    gy = max((y1 - y0) * ratio, 1e-12)
    return (x0 - gx, x1 + gx, y0 - gy, y1 + gy)


def split_rect(rect) -> tuple:
    """Halve a rectangle at the midpoint of its longer axis (tie splits x)."""
    x0, x1, y0, y1 = rect
    if x1 - x0 >= y1 - y0:
        mid = 0.5 * (x0 + x1)
        return (x0, mid, y0, y1), (mid, x1, y0, y1)
    mid = 0.5 * (y0 + y1)
    return (x0, x1, y0, mid), (x0, x1, mid, y1)


def _box_corners(expanded, z_range) -> np.ndarray:
    x0, x1, y0, y1 = expanded
    z0, z1 = z_range
    return np.array([[x, y, z]
                     for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)])


def _clip_polygon(poly, lo, hi):
    """Clip a convex polygon to an axis-aligned rectangle."""
    for axis in (0, 1):
        for bound, sign in ((lo[axis], 1.0), (hi[axis], -1.0)):
            if len(poly) < 3:
                return []
            out = []
            for k in range(len(poly)):
                a, b = poly[k - 1], poly[k]
                da = sign * (a[axis] - bound)
                db = sign * (b[axis] - bound)
                if db >= 0.0:
                    if da < 0.0:
                        out.append(_edge_crossing(a, b, da, db))
                    out.append(b)
                elif da >= 0.0:
                    out.append(_edge_crossing(a, b, da, db))
            poly = out
    return poly


def _edge_crossing(a, b, da, db):
    t = da / (da - db)
    return (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))


def polygon_area(poly) -> float:
    """Shoelace area of a simple polygon given as a vertex sequence."""
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(x @ np.roll(y, -1) - y @ np.roll(x, -1))


_BOX_EDGES = tuple((i, i ^ b) for i in range(8) for b in (1, 2, 4)
                   if i < (i ^ b))


def projected_box_area_ratio(view: CameraView, corners: np.ndarray,
                             near: float = 0.01) -> float:
    """Fraction of the image covered by the silhouette of a projected box.

    The silhouette of a convex box is the convex hull of its projected
    corners; corners behind the near plane are replaced by the points where
    box edges cross it, which is exact for a convex solid.  The hull is then
    clipped to the image frame.  Returns 0.0 when nothing lies in front.
    """
    cam = view.world_to_camera(corners)
    pts = [cam[i] for i in range(len(cam)) if cam[i, 2] > near]
    for i, j in _BOX_EDGES:
        zi, zj = cam[i, 2], cam[j, 2]
        if (zi > near) != (zj > near):
            t = (near - zi) / (zj - zi)
            pts.append(cam[i] + t * (cam[j] - cam[i]))
    if len(pts) < 3:
        return 0.0
    pts = np.asarray(pts)
    uvw = pts @ view.intrinsics.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    try:
        hull = ConvexHull(uv)
    except QhullError:
        return 0.0
    poly = [tuple(uv[k]) for k in hull.vertices]
    ox, oy = view.crop_origin
    poly = _clip_polygon(poly, (ox, oy), (ox + view.width, oy + view.height))
    return polygon_area(poly) / (view.width * view.height)


def assign_images(views: Sequence[CameraView], expanded, z_range,
                  config: PartitionConfig) -> np.ndarray:
    """Image ids that see a cell: camera inside the grown rectangle, or the
    cell's box covering more of the frame than the area threshold."""
    x0, x1, y0, y1 = expanded
    chosen = np.zeros(len(views), dtype=bool)
    for k, view in enumerate(views):
        cx, cy = view.camera_center[:2]
        chosen[k] = x0 <= cx <= x1 and y0 <= cy <= y1
    if z_range is not None:
        corners = _box_corners(expanded, z_range)
        for k in np.nonzero(~chosen)[0]:
            ratio = projected_box_area_ratio(views[k], corners)
            if ratio > config.area_threshold:
                chosen[k] = True
    return np.nonzero(chosen)[0]


@dataclass
class PartitionResult:
    cells: list
    root_rect: tuple
    orphan_gaussians: np.ndarray
    unassigned_images: np.ndarray
    config: PartitionConfig

    def report(self) -> dict:
        """JSON-ready summary of the partition."""
        return {
            "root_rect": [float(v) for v in self.root_rect],
            "num_cells": len(self.cells),
            "cells": [{
                "id": cell.id,
                "rect": [float(v) for v in cell.rect],
                "expanded": [float(v) for v in cell.expanded],
                "z_range": (None if cell.z_range is None
                            else [float(v) for v in cell.z_range]),
                "depth": cell.depth,
                "num_images": int(cell.image_ids.size),
                "num_gaussians": int(cell.gaussian_ids.size),
                "image_ids": [int(i) for i in cell.image_ids],
            } for cell in self.cells],
            "orphan_gaussians": [int(i) for i in self.orphan_gaussians],
            "unassigned_images": [int(i) for i in self.unassigned_images],
        }

    def save_report(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2)

    def to_svg(self, views: Sequence[CameraView], size: int = 640) -> str:
        """Overhead plot: camera positions in red, cell edges in blue."""
        centers = (np.array([v.camera_center[:2] for v in views])
                   if len(views) else np.zeros((0, 2)))
        xs = [self.root_rect[0], self.root_rect[1], *centers[:, 0]]
        ys = [self.root_rect[2], self.root_rect[3], *centers[:, 1]]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        span = max(x_hi - x_lo, y_hi - y_lo, 1e-9)
        pad = 0.05 * span
        x_lo, y_lo = x_lo - pad, y_lo - pad
        scale = size / (span + 2 * pad)

        def sx(x):
            return (x - x_lo) * scale

        def sy(y):
            # svg y grows downward
            return size - (y - y_lo) * scale

        height = size
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{size}" height="{height}" '
            f'viewBox="0 0 {size} {height}">',
            f'<rect x="0" y="0" width="{size}" height="{height}" '
            f'fill="white"/>',
        ]
        for cell in self.cells:
            x0, x1, y0, y1 = cell.rect
            parts.append(
                f'<rect x="{sx(x0):.2f}" y="{sy(y1):.2f}" '
                f'width="{(x1 - x0) * scale:.2f}" '
                f'height="{(y1 - y0) * scale:.2f}" '
                f'fill="none" stroke="blue" stroke-width="1.5"/>')
        for cx, cy in centers:
            parts.append(f'<circle cx="{sx(cx):.2f}" cy="{sy(cy):.2f}" '
                         f'r="3" fill="red"/>')
        parts.append("</svg>")
        return "\n".join(parts)

    def save_svg(self, path, views: Sequence[CameraView]) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_svg(views))


def build_partition(scene: GaussianScene, views: Sequence[CameraView],
                    config: PartitionConfig = None,
                    blend_weights: Optional[np.ndarray] = None,
                    raster_config: RasterConfig = None) -> PartitionResult:
    """Split the scene footprint into leaf cells and assign images/Gaussians.

    ``blend_weights`` may carry a precomputed (num_views, num_gaussians)
    matrix of accumulated blending weights; otherwise each needed view is
    rendered once to measure them.
    """
    config = (config or PartitionConfig()).validate()
    if len(scene) == 0:
        raise PartitionError("cannot partition an empty scene")
    if len(views) == 0:
        raise PartitionError("cannot partition without views")
    if blend_weights is not None:
        blend_weights = np.asarray(blend_weights, dtype=float)
        if blend_weights.shape != (len(views), len(scene)):
            raise ValueError("blend_weights must have shape "
                             "(num_views, num_gaussians)")

    xy = scene.positions[:, :2]
    z = scene.positions[:, 2]
    root_rect = (float(xy[:, 0].min()), float(xy[:, 0].max()),
                 float(xy[:, 1].min()), float(xy[:, 1].max()))

    def members_of(expanded):
        x0, x1, y0, y1 = expanded
        return ((xy[:, 0] >= x0) & (xy[:, 0] <= x1)
                & (xy[:, 1] >= y0) & (xy[:, 1] <= y1))

    leaves = []

    def recurse(rect, depth):
        expanded = expand_rect(rect, config.expansion_ratio)
        members = members_of(expanded)
        z_range = (tuple(np.percentile(z[members], [1.0, 99.0]))
                   if members.any() else None)
        images = assign_images(views, expanded, z_range, config)
        if depth == 0 and images.size < config.keep_min_images:
            raise PartitionError(
                f"only {images.size} image(s) cover the whole scene, "
                f"need {config.keep_min_images}; run it as a single block")
        l_x, l_y = rect[1] - rect[0], rect[3] - rect[2]
        if images.size <= config.max_images \
                or min(l_x, l_y) <= config.min_length:
            leaves.append((rect, expanded, z_range, images, members, depth))
            return
        left, right = split_rect(rect)
        recurse(left, depth + 1)
        recurse(right, depth + 1)

    recurse(root_rect, 0)

    kept = [leaf for leaf in leaves
            if leaf[3].size >= config.keep_min_images]
    dropped = len(leaves) - len(kept)
    if dropped:
        logger.info("dropped %d leaf cell(s) seen by fewer than %d images",
                    dropped, config.keep_min_images)
    if not kept:
        raise PartitionError(
            "every leaf fell below the image keep-minimum; relax the "
            "configuration or run the scene as a single block")

    needed = sorted({int(k) for leaf in kept for k in leaf[3]})
    if blend_weights is None:
        raster_config = raster_config or RasterConfig()
        weight_rows = {k: gaussian_weight_totals(scene, views[k],
                                                 raster_config)
                       for k in needed}
    else:
        weight_rows = {k: blend_weights[k] for k in needed}

    cells = []
    for cell_id, (rect, expanded, z_range, images, members, depth) \
            in enumerate(kept):
        if z_range is None:
            in_box = np.zeros(len(scene), dtype=bool)
        else:
            in_box = members & (z >= z_range[0]) & (z <= z_range[1])
        seen = np.zeros(len(scene), dtype=bool)
        for k in images:
            seen |= weight_rows[int(k)] > config.weight_floor
        gaussian_ids = np.nonzero(in_box | seen)[0]
        cells.append(PartitionCell(
            id=cell_id, rect=rect, expanded=expanded, z_range=z_range,
            image_ids=np.asarray(images, dtype=np.int64),
            gaussian_ids=gaussian_ids, depth=depth))

    covered = np.zeros(len(scene), dtype=bool)
    used = np.zeros(len(views), dtype=bool)
    for cell in cells:
        covered[cell.gaussian_ids] = True
        used[cell.image_ids] = True
    orphans = np.nonzero(~covered)[0]
    unassigned = np.nonzero(~used)[0]
    if orphans.size:
        logger.info("%d Gaussian(s) belong to no cell", orphans.size)
    if unassigned.size:
        logger.info("%d image(s) assigned to no cell", unassigned.size)
    return PartitionResult(cells=cells, root_rect=root_rect,
                           orphan_gaussians=orphans,
                           unassigned_images=unassigned, config=config)
