"""Differentiable tile-based rasterizer for planar Gaussians.

Forward: project Gaussians to screen, sort front-to-back, alpha-blend
color, world-frame normals, and plane distances per pixel, then form the
unbiased depth as a true ray-plane intersection: the blended plane
(unit-normalized normal, opacity-normalized distance) is intersected with
the pixel ray.  Backward: hand-derived adjoint of the whole chain back to
every Gaussian parameter.

Pixel coordinates are parent-absolute (crop_origin included), so rendering
a sub-view is bit-identical to cropping the full render.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from splatsurf.images import save_pfm
from splatsurf.scene import CameraView, GaussianScene


@dataclass
class RasterConfig:
    tile_size: int = 16
    near: float = 0.01              # world units; camera-z cull plane
    blur: float = 0.3               # px^2 low-pass added to screen covariance
    sigma_cutoff: float = 3.0       # Mahalanobis influence radius
    alpha_cutoff: float = 1.0 / 255.0
    max_alpha: float = 0.99
    transmittance_floor: float = 1e-4
    alpha_floor: float = 0.5        # minimum coverage for a valid depth
    normal_eps: float = 1e-6
    jobs: int = 1


@dataclass
class ProjectionData:
    """Per-Gaussian screen-space quantities; `valid` masks culled entries."""

    means2d: np.ndarray      # (N, 2) absolute pixel coordinates
    cov2d: np.ndarray        # (N, 2, 2)
    cov2d_inv: np.ndarray    # (N, 2, 2)
    radius: np.ndarray       # (N,) 3-sigma screen radius
    depth_z: np.ndarray      # (N,) camera-frame z of the mean
    x_cam: np.ndarray        # (N, 3)
    plane_dist: np.ndarray   # (N,) d_i = n . (pos - camera center)
    normal_world: np.ndarray  # (N, 3) away-facing unit normals
    normal_cam: np.ndarray   # (N, 3)
    opacity: np.ndarray      # (N,)
    valid: np.ndarray        # (N,) bool
    skipped_nonfinite: int


@dataclass
class RenderOutput:
    color: np.ndarray        # (H, W, 3)
    alpha: np.ndarray        # (H, W)
    normal: np.ndarray       # (H, W, 3) unit world normals, 0 where undefined
    distance: np.ndarray     # (H, W) blended plane distance (unnormalized)
    depth: np.ndarray        # (H, W) ray-plane depth, 0 where invalid
    contributors: np.ndarray  # (H, W) int
    valid_depth: np.ndarray  # (H, W) bool
    cache: "_ForwardCache" = None

    def plane_distance(self) -> np.ndarray:
        """Opacity-normalized plane distance (true camera-to-plane length)."""
        out = np.zeros_like(self.distance)
        np.divide(self.distance, self.alpha, out=out, where=self.alpha > 0)
        return out


@dataclass
class RenderUpstream:
    """Per-pixel loss gradients for each output map (missing -> zeros)."""

    color: np.ndarray = None
    alpha: np.ndarray = None
    normal: np.ndarray = None
    distance: np.ndarray = None
    depth: np.ndarray = None


@dataclass
class RenderGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    screen_positions: np.ndarray  # (N, 2) d loss / d 2D mean, for densify


@dataclass
class _ForwardCache:
    proj: ProjectionData
    order: np.ndarray            # valid ids sorted front-to-back
    tile_ids: np.ndarray         # contributor gaussian ids, tile-major
    tile_offsets: np.ndarray     # (num_tiles + 1,) slice bounds into tile_ids
    blend_normal: np.ndarray     # (H, W, 3) pre-normalization blend
    normal_norm: np.ndarray      # (H, W)
    ray_world: np.ndarray        # (H, W, 3)
    denom: np.ndarray            # (H, W) unit-normal . ray
    config: RasterConfig
    view: CameraView
    blend: list = None           # per-tile _TileBlend, kept for the backward


class _TileBlend(NamedTuple):
    """Per-contributor (K, P) blending state of one tile."""

    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    alpha_raw: np.ndarray
    alpha: np.ndarray
    alive: np.ndarray
    include: np.ndarray
    t_prev: np.ndarray
    weight: np.ndarray


def project(scene: GaussianScene, view: CameraView,
            config: RasterConfig = None) -> ProjectionData:
    """Screen-space projection of every Gaussian (camera-z culled only)."""
    config = config or RasterConfig()
    n = len(scene)
    center = view.camera_center
    w_mat = view.rotation_c2w.T               # world -> camera
    rel = scene.positions - center
    x_cam = rel @ view.rotation_c2w           # equals (w_mat @ rel.T).T
    z = x_cam[:, 2]
    in_front = z > config.near

    fx, fy = view.fx, view.fy
    cx = view.intrinsics[0, 2] + view.crop_origin[0]
    cy = view.intrinsics[1, 2] + view.crop_origin[1]
    zs = np.where(in_front, z, 1.0)
    means2d = np.stack([fx * x_cam[:, 0] / zs + cx,
                        fy * x_cam[:, 1] / zs + cy], axis=-1)

    cov_world = scene.covariance()
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 1, 1] = fy / zs
    jac[:, 0, 2] = -fx * x_cam[:, 0] / zs ** 2
    jac[:, 1, 2] = -fy * x_cam[:, 1] / zs ** 2
    # Non-finite covariances are culled below, so let them pass through here.
    with np.errstate(invalid="ignore", over="ignore"):
        cov_cam = (w_mat @ cov_world) @ w_mat.T
        cov2d = (jac @ cov_cam) @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += config.blur
    cov2d[:, 1, 1] += config.blur

    finite = np.isfinite(cov2d).all(axis=(1, 2))
    det = (cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0])
    invertible = det > 0
    valid = in_front & finite & invertible
    skipped = int(np.count_nonzero(in_front & ~(finite & invertible)))

    det_safe = np.where(valid, det, 1.0)
    cov2d_inv = np.empty_like(cov2d)
    cov2d_inv[:, 0, 0] = cov2d[:, 1, 1] / det_safe
    cov2d_inv[:, 1, 1] = cov2d[:, 0, 0] / det_safe
    cov2d_inv[:, 0, 1] = -cov2d[:, 0, 1] / det_safe
    cov2d_inv[:, 1, 0] = -cov2d[:, 1, 0] / det_safe

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(mid ** 2 - det_safe, 0.0))
    lam_max = np.maximum(mid + disc, 1e-12)
    radius = config.sigma_cutoff * np.sqrt(lam_max)

    normal_world = scene.plane_normals(camera_center=center)
    plane_dist = np.einsum("ni,ni->n", normal_world, rel)
    normal_cam = normal_world @ view.rotation_c2w

    return ProjectionData(means2d=means2d, cov2d=cov2d, cov2d_inv=cov2d_inv,
                          radius=radius, depth_z=z, x_cam=x_cam,
                          plane_dist=plane_dist, normal_world=normal_world,
                          normal_cam=normal_cam,
                          opacity=scene.opacities, valid=valid,
                          skipped_nonfinite=skipped)


def _tile_bins(proj: ProjectionData, width, height, tile, crop):
    """Assign each sorted Gaussian to the tiles its 3-sigma box overlaps.

    Returns (order, tile_ids, tile_offsets): contributor ids grouped per
    tile in canonical front-to-back order (depth, then insertion index).
    """
    valid_ids = np.nonzero(proj.valid)[0]
    order = valid_ids[np.lexsort(
        (valid_ids, proj.depth_z[valid_ids]))]
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    num_tiles = tiles_x * tiles_y
    if order.size == 0:
        return order, np.zeros(0, np.int64), np.zeros(num_tiles + 1, np.int64)

    ux = proj.means2d[order, 0] - crop[0]   # local continuous coordinates
    uy = proj.means2d[order, 1] - crop[1]
    r = proj.radius[order]
    tx0 = np.clip(np.floor((ux - r) / tile).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((ux + r) / tile).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((uy - r) / tile).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((uy + r) / tile).astype(np.int64), 0, tiles_y - 1)
    offscreen = (ux + r < 0) | (ux - r >= tiles_x * tile) | \
                (uy + r < 0) | (uy - r >= tiles_y * tile)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = np.where(offscreen, 0, nx * ny)

    total = int(counts.sum())
    rank_rep = np.repeat(np.arange(order.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    nx_rep = np.repeat(nx, counts)
    dx = local % nx_rep
    dy = local // nx_rep
    tile_xy = (np.repeat(ty0, counts) + dy) * tiles_x + np.repeat(tx0, counts) + dx
    sorter = np.lexsort((rank_rep, tile_xy))
    tile_sorted = tile_xy[sorter]
    tile_ids = order[rank_rep[sorter]]
    tile_offsets = np.searchsorted(tile_sorted, np.arange(num_tiles + 1))
    return order, tile_ids, tile_offsets


def _pixel_centers(width, height, tile_index, tiles_x, tile, crop):
    ty, tx = divmod(tile_index, tiles_x)
    x0, y0 = tx * tile, ty * tile
    x1, y1 = min(x0 + tile, width), min(y0 + tile, height)
    cols = np.arange(x0, x1)
    rows = np.arange(y0, y1)
    px = cols[None, :] + (0.5 + crop[0])
    py = rows[:, None] + (0.5 + crop[1])
    return (slice(y0, y1), slice(x0, x1)), px, py


def _blend_tile(proj, ids, px, py, config) -> _TileBlend:
    """Alpha-blend one tile.  Returns per-contributor (K, P) state."""
    pix_x = np.broadcast_to(px, (py.size, px.size)).reshape(-1)   # (P,)
    pix_y = np.broadcast_to(py, (py.size, px.size)).reshape(-1)
    means = proj.means2d[ids]
    dx = pix_x[None, :] - means[:, 0, None]       # (K, P)
    dy = pix_y[None, :] - means[:, 1, None]
    ci = proj.cov2d_inv[ids]
    power = dx * dx * (-0.5 * ci[:, 0, 0, None])
    power += dx * dy * (-ci[:, 0, 1, None])
    power += dy * dy * (-0.5 * ci[:, 1, 1, None])
    inside = power >= -0.5 * config.sigma_cutoff ** 2
    gauss = np.zeros_like(power)
    np.exp(power, out=gauss, where=inside)
    alpha_raw = proj.opacity[ids][:, None] * gauss
    alpha = np.minimum(alpha_raw, config.max_alpha)
    alive = alpha_raw >= config.alpha_cutoff
    alpha *= alive
    cum = np.cumprod(1.0 - alpha, axis=0)
    # A contributor that would push transmittance below the floor is dropped,
    # as is everything behind it.
    include = ~np.maximum.accumulate(cum < config.transmittance_floor, axis=0)
    t_prev = np.empty_like(cum)
    t_prev[0] = 1.0
    t_prev[1:] = cum[:-1]
    weight = alpha * t_prev
    weight *= include
    return _TileBlend(dx, dy, gauss, alpha_raw, alpha, alive, include,
                      t_prev, weight)


def render(scene: GaussianScene, view: CameraView,
           config: RasterConfig = None) -> RenderOutput:
    config = config or RasterConfig()
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    h, w = view.height, view.width
    tile = config.tile_size
    crop = view.crop_origin
    proj = project(scene, view, config)
    order, tile_ids, tile_offsets = _tile_bins(proj, w, h, tile, crop)
    tiles_x = (w + tile - 1) // tile
    num_tiles = tile_offsets.size - 1

    color = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    blend_normal = np.zeros((h, w, 3))
    dist_map = np.zeros((h, w))
    contrib = np.zeros((h, w), dtype=np.int64)
    blend = [None] * num_tiles       # kept on the cache for the backward

    def run_tile(t):
        sel, px, py = _pixel_centers(w, h, t, tiles_x, tile, crop)
        ids = tile_ids[tile_offsets[t]:tile_offsets[t + 1]]
        if ids.size == 0:
            return
        bl = _blend_tile(proj, ids, px, py, config)
        blend[t] = bl
        weight = bl.weight
        shape = (py.size, px.size)
        color[sel] = (weight.T @ scene.colors[ids]).reshape(*shape, 3)
        blend_normal[sel] = (weight.T @ proj.normal_world[ids]).reshape(*shape, 3)
        dist_map[sel] = (weight.T @ proj.plane_dist[ids]).reshape(shape)
        alpha_map[sel] = weight.sum(axis=0).reshape(shape)
        contrib[sel] = ((bl.alive & bl.include) & (bl.alpha > 0)).sum(axis=0) \
            .reshape(shape)

    _run_tiles(run_tile, num_tiles, config.jobs)

    ray_world = view.pixel_rays()
    norm = np.linalg.norm(blend_normal, axis=-1)
    has_normal = norm > config.normal_eps
    unit_normal = np.zeros_like(blend_normal)
    np.divide(blend_normal, norm[..., None], out=unit_normal,
              where=has_normal[..., None])
    denom = (unit_normal * ray_world).sum(axis=-1)
    valid = (alpha_map >= config.alpha_floor) & has_normal \
        & (np.abs(denom) >= 1e-6)
    depth = np.zeros((h, w))
    np.divide(dist_map, alpha_map * denom, out=depth, where=valid)

    cache = _ForwardCache(proj=proj, order=order, tile_ids=tile_ids,
                          tile_offsets=tile_offsets,
                          blend_normal=blend_normal, normal_norm=norm,
                          ray_world=ray_world, denom=denom,
                          config=config, view=view, blend=blend)
    return RenderOutput(color=color, alpha=alpha_map, normal=unit_normal,
                        distance=dist_map, depth=depth, contributors=contrib,
                        valid_depth=valid, cache=cache)


def gaussian_weight_totals(scene: GaussianScene, view: CameraView,
                           config: RasterConfig = None) -> np.ndarray:
    """Per-Gaussian blending weight summed over every pixel of one view.

    The weight of a contributor at a pixel is alpha times the transmittance
    in front of it, so the total measures how much the Gaussian is actually
    seen from this camera.  Zero means it never survives the blend.
    """
    config = config or RasterConfig()
    totals = np.zeros(len(scene))
    if len(scene) == 0:
        return totals
    h, w = view.height, view.width
    tile = config.tile_size
    crop = view.crop_origin
    proj = project(scene, view, config)
    _, tile_ids, tile_offsets = _tile_bins(proj, w, h, tile, crop)
    tiles_x = (w + tile - 1) // tile
    for t in range(tile_offsets.size - 1):
        ids = tile_ids[tile_offsets[t]:tile_offsets[t + 1]]
        if ids.size == 0:
            continue
        _, px, py = _pixel_centers(w, h, t, tiles_x, tile, crop)
        weight = _blend_tile(proj, ids, px, py, config).weight
        np.add.at(totals, ids, weight.sum(axis=1))
    return totals


def _run_tiles(fn, num_tiles, jobs):
    if jobs <= 1:
        for t in range(num_tiles):
            fn(t)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(fn, range(num_tiles)))


def render_backward(scene: GaussianScene, output: RenderOutput,
                    upstream: RenderUpstream) -> RenderGradients:
    cache = output.cache
    if cache is None:
        raise ValueError("render output carries no backward cache")
    proj, config, view = cache.proj, cache.config, cache.view
    h, w = view.height, view.width
    n = len(scene)
    tile = config.tile_size
    tiles_x = (w + tile - 1) // tile
    num_tiles = cache.tile_offsets.size - 1

    zeros2d = np.zeros((h, w))
    zeros3d = np.zeros((h, w, 3))
    g_color = zeros3d if upstream.color is None else upstream.color
    g_alpha_up = zeros2d if upstream.alpha is None else upstream.alpha
    g_normal_up = zeros3d if upstream.normal is None else upstream.normal
    g_dist_up = zeros2d if upstream.distance is None else upstream.distance
    g_depth = zeros2d if upstream.depth is None else upstream.depth

    # Depth chain: D = dist / (alpha * denom) on valid pixels.
    valid = output.valid_depth
    denom = cache.denom
    safe = np.where(valid, output.alpha * denom, 1.0)
    g_dist_pix = g_dist_up + np.where(valid, g_depth / safe, 0.0)
    g_alpha_pix = g_alpha_up + np.where(
        valid, -g_depth * output.depth / np.where(valid, output.alpha, 1.0), 0.0)
    g_denom = np.where(valid, -g_depth * output.depth
                       / np.where(valid, denom, 1.0), 0.0)
    g_unit_normal = g_normal_up + g_denom[..., None] * cache.ray_world

    # Through the per-pixel normalization of the blended normal.
    has_normal = cache.normal_norm > config.normal_eps
    norm_safe = np.where(has_normal, cache.normal_norm, 1.0)
    unit = output.normal
    dot = (unit * g_unit_normal).sum(axis=-1)
    g_blend_normal = np.where(
        has_normal[..., None],
        (g_unit_normal - unit * dot[..., None]) / norm_safe[..., None], 0.0)

    g_means2d = np.zeros((n, 2))
    g_covinv = np.zeros((n, 2, 2))
    g_opacity = np.zeros(n)
    g_colors = np.zeros((n, 3))
    g_nworld = np.zeros((n, 3))
    g_pdist = np.zeros(n)

    def tile_grads(t):
        sel, _, _ = _pixel_centers(w, h, t, tiles_x, tile, cache.view.crop_origin)
        ids = cache.tile_ids[cache.tile_offsets[t]:cache.tile_offsets[t + 1]]
        if ids.size == 0:
            return None
        bl = cache.blend[t]
        gc = g_color[sel].reshape(-1, 3)
        gn = g_blend_normal[sel].reshape(-1, 3)
        gd = g_dist_pix[sel].reshape(-1)
        ga = g_alpha_pix[sel].reshape(-1)
        # Per-contributor upstream dot product over its blended quantities.
        b = (scene.colors[ids] @ gc.T + proj.normal_world[ids] @ gn.T
             + np.outer(proj.plane_dist[ids], gd) + ga[None, :])
        wb = bl.weight * b
        suffix = np.cumsum(wb[::-1], axis=0)[::-1]
        g_alpha_k = bl.include * (bl.t_prev * b - (suffix - wb)
                                  / (1.0 - bl.alpha))
        grad_gate = bl.alive & (bl.alpha_raw < config.max_alpha) & bl.include
        g_alpha_raw = np.where(grad_gate, g_alpha_k, 0.0)
        g_gauss = g_alpha_raw * proj.opacity[ids][:, None]
        g_op = (g_alpha_raw * bl.gauss).sum(axis=1)
        g_power = g_gauss * bl.gauss
        ci = proj.cov2d_inv[ids]
        ci_dx = ci[:, 0, 0, None] * bl.dx + ci[:, 0, 1, None] * bl.dy
        ci_dy = ci[:, 1, 0, None] * bl.dx + ci[:, 1, 1, None] * bl.dy
        g_mu = np.stack([(g_power * ci_dx).sum(axis=1),
                         (g_power * ci_dy).sum(axis=1)], axis=-1)
        gp_dx = g_power * bl.dx
        m_xx = (gp_dx * bl.dx).sum(axis=1)
        m_xy = (gp_dx * bl.dy).sum(axis=1)
        m_yy = (g_power * bl.dy * bl.dy).sum(axis=1)
        g_ci = -0.5 * np.stack([np.stack([m_xx, m_xy], axis=-1),
                                np.stack([m_xy, m_yy], axis=-1)], axis=1)
        g_col = bl.weight @ gc
        g_nw = bl.weight @ gn
        g_pd = bl.weight @ gd
        return ids, g_mu, g_ci, g_op, g_col, g_nw, g_pd

    results = [None] * num_tiles
    if config.jobs <= 1:
        for t in range(num_tiles):
            results[t] = tile_grads(t)
    else:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(tile_grads, range(num_tiles)))
    for res in results:              # fixed tile order: deterministic merge
        if res is None:
            continue
        ids, g_mu, g_ci, g_op, g_col, g_nw, g_pd = res
        np.add.at(g_means2d, ids, g_mu)
        np.add.at(g_covinv, ids, g_ci)
        np.add.at(g_opacity, ids, g_op)
        np.add.at(g_colors, ids, g_col)
        np.add.at(g_nworld, ids, g_nw)
        np.add.at(g_pdist, ids, g_pd)

    grads = _projection_backward(scene, proj, view, config, g_means2d,
                                 g_covinv, g_opacity, g_colors, g_nworld,
                                 g_pdist)
    return grads


def _projection_backward(scene, proj, view, config, g_means2d, g_covinv,
                         g_opacity, g_colors, g_nworld, g_pdist):
    n = len(scene)
    valid = proj.valid
    fx, fy = view.fx, view.fy
    w_mat = view.rotation_c2w.T
    x_cam = proj.x_cam
    z = np.where(valid, proj.depth_z, 1.0)
    x, y = x_cam[:, 0], x_cam[:, 1]

    zero_invalid = lambda a: np.where(
        valid.reshape((-1,) + (1,) * (a.ndim - 1)), a, 0.0)
    g_means2d = zero_invalid(g_means2d)
    g_covinv = zero_invalid(g_covinv)
    g_opacity = zero_invalid(g_opacity)
    g_colors = zero_invalid(g_colors)
    g_nworld = zero_invalid(g_nworld)
    g_pdist = zero_invalid(g_pdist)

    # Sigma2d_inv -> Sigma2d.
    ci = proj.cov2d_inv
    g_cov2d = -((ci @ g_covinv) @ ci)

    # Sigma2d = J Sigma_cam J^T (+ const blur).
    cov_world = scene.covariance()
    cov_cam = (w_mat @ cov_world) @ w_mat.T
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 1, 1] = fy / z
    jac[:, 0, 2] = -fx * x / z ** 2
    jac[:, 1, 2] = -fy * y / z ** 2
    g_cov_cam = (np.swapaxes(jac, 1, 2) @ g_cov2d) @ jac
    g_jac = 2.0 * ((g_cov2d @ jac) @ cov_cam)

    g_xcam = np.zeros((n, 3))
    g_xcam[:, 0] += g_jac[:, 0, 2] * (-fx / z ** 2)
    g_xcam[:, 1] += g_jac[:, 1, 2] * (-fy / z ** 2)
    g_xcam[:, 2] += (g_jac[:, 0, 0] * (-fx / z ** 2)
                     + g_jac[:, 1, 1] * (-fy / z ** 2)
                     + g_jac[:, 0, 2] * (2.0 * fx * x / z ** 3)
                     + g_jac[:, 1, 2] * (2.0 * fy * y / z ** 3))

    # Screen mean path.
    g_xcam[:, 0] += g_means2d[:, 0] * fx / z
    g_xcam[:, 1] += g_means2d[:, 1] * fy / z
    g_xcam[:, 2] += (-g_means2d[:, 0] * fx * x / z ** 2
                     - g_means2d[:, 1] * fy * y / z ** 2)

    # Sigma_cam = W Sigma_world W^T.
    g_cov_world = (w_mat.T @ g_cov_cam) @ w_mat

    # Plane distance d = n . (pos - c): contributes to position and normal.
    rel = scene.positions - view.camera_center
    g_positions = g_pdist[:, None] * proj.normal_world
    g_nworld = g_nworld + g_pdist[:, None] * rel

    # Normal = sign * R[:, min_axis].
    rot = scene.rotation_matrices()
    axes = scene.min_scale_axes()
    raw_cols = rot[np.arange(n), :, axes]
    signs = np.where((raw_cols * rel).sum(axis=1) < 0, -1.0, 1.0)
    g_rot = np.zeros((n, 3, 3))
    g_rot[np.arange(n), :, axes] += signs[:, None] * g_nworld

    # Sigma_world = R S^2 R^T.
    scales2 = scene.scales ** 2
    g_rot += 2.0 * (g_cov_world @ (rot * scales2[:, None, :]))
    diag = (rot * (g_cov_world @ rot)).sum(axis=1)
    g_log_scales = 2.0 * scales2 * diag

    # Camera-frame position: x_cam = W (pos - c).
    g_positions = g_positions + g_xcam @ w_mat

    g_rotations = _quat_backward(scene.rotations, g_rot)
    opac = proj.opacity
    g_opacity_logits = g_opacity * opac * (1.0 - opac)

    g_positions = np.where(valid[:, None], g_positions, 0.0)
    g_log_scales = np.where(valid[:, None], g_log_scales, 0.0)
    g_rotations = np.where(valid[:, None], g_rotations, 0.0)
    g_opacity_logits = np.where(valid, g_opacity_logits, 0.0)

    return RenderGradients(positions=g_positions, log_scales=g_log_scales,
                           rotations=g_rotations,
                           opacity_logits=g_opacity_logits, colors=g_colors,
                           screen_positions=g_means2d)


def _quat_backward(quats: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Chain (N,3,3) rotation gradients to raw (unnormalized) quaternions."""
    n = quats.shape[0]
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    qh = quats / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zeros = np.zeros(n)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=1)

    d_w = mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    d_x = mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    d_y = mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    d_z = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])
    g_qh = np.stack([(g_rot * d).sum(axis=(1, 2))
                     for d in (d_w, d_x, d_y, d_z)], axis=-1)
    # Through normalization: g_q = (I - qh qh^T) g_qh / |q|.
    proj_out = g_qh - qh * (qh * g_qh).sum(axis=1)[:, None]
    return proj_out / norm


def save_debug_maps(output: RenderOutput, directory, prefix: str = "render"):
    """Dump all five float maps as PFM files for external inspection."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_pfm(directory / f"{prefix}_color.pfm", output.color)
    save_pfm(directory / f"{prefix}_alpha.pfm", output.alpha)
    save_pfm(directory / f"{prefix}_normal.pfm", output.normal)
    save_pfm(directory / f"{prefix}_distance.pfm", output.distance)
    save_pfm(directory / f"{prefix}_depth.pfm", output.depth)
    return [directory / f"{prefix}_{name}.pfm"
            for name in ("color", "alpha", "normal", "distance", "depth")]
