"""Synthetic desk scenes with exact geometry for end-to-end validation.

A textured ground plane plus two boxes, imaged by a ring of cameras, gives
ground-truth images, depth maps, and surface points against which the
reconstruction pipeline is scored.  Optional per-image exposure multipliers,
a moving occluder quad, and a textureless patch exercise the appearance
model, the transient mask, and the texture-less regularizer.
"""

from dataclasses import dataclass, field

import numpy as np

from .colmap import ColmapBundle
from .scene import CameraView


@dataclass
class SyntheticConfig:
    image_size: int = 128
    num_views: int = 24
    ring_radius: float = 1.8
    ring_height: float = 2.8
    focal_factor: float = 1.0
    look_at: tuple = (0.0, 0.0, 0.1)
    plane_half_extent: float = 2.2
    principal_jitter: float = 0.125   # fraction of width, keeps crops exact
    textureless_region: tuple = None  # (xmin, xmax, ymin, ymax) on the plane
    exposure_range: tuple = None      # (low, high) per-image multipliers
    transient_views: tuple = ()
    seed: int = 0


def desk_mesh(plane_half_extent: float = 1.6):
    """Ground square plus two axis-aligned boxes; returns (vertices, triangles).

    Triangles 0-1 are the ground plane, the rest belong to the boxes.
    """
    e = plane_half_extent
    vertices = [(-e, -e, 0.0), (e, -e, 0.0), (e, e, 0.0), (-e, e, 0.0)]
    triangles = [(0, 1, 2), (0, 2, 3)]

    def add_box(cx, cy, sx, sy, sz):
        base = len(vertices)
        xs, ys = (cx - sx / 2, cx + sx / 2), (cy - sy / 2, cy + sy / 2)
        for z in (0.0, sz):
            for x, y in ((xs[0], ys[0]), (xs[1], ys[0]),
                         (xs[1], ys[1]), (xs[0], ys[1])):
                vertices.append((x, y, z))
        b, t = base, base + 4
        quads = [(t, t + 1, t + 2, t + 3),            # top
                 (b, b + 1, t + 1, t), (b + 1, b + 2, t + 2, t + 1),
                 (b + 2, b + 3, t + 3, t + 2), (b + 3, b, t, t + 3)]
        for q in quads:
            triangles.append((q[0], q[1], q[2]))
            triangles.append((q[0], q[2], q[3]))

    add_box(-0.45, -0.30, 0.55, 0.45, 0.35)
    add_box(0.50, 0.35, 0.40, 0.55, 0.25)
    return (np.array(vertices, dtype=np.float64),
            np.array(triangles, dtype=np.int64))


def surface_color(points: np.ndarray, textureless_region=None) -> np.ndarray:
    """Deterministic multi-frequency albedo over world positions."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = 0.45 + 0.30 * np.sin(6.1 * x + 0.9) * np.cos(4.7 * y - 0.4) \
        + 0.12 * np.sin(12.9 * (x + y)) + 0.10 * z
    g = 0.50 + 0.30 * np.cos(5.3 * x - 1.2) * np.sin(5.9 * y + 0.8) \
        + 0.10 * np.cos(11.7 * (x - y)) + 0.15 * z
    b = 0.55 + 0.25 * np.sin(4.3 * x + 2.0) * np.sin(6.7 * y + 1.1) \
        + 0.08 * np.sin(13.7 * x) * np.cos(12.3 * y) - 0.10 * z
    color = np.clip(np.stack([r, g, b], axis=-1), 0.05, 0.95)
    if textureless_region is not None:
        xmin, xmax, ymin, ymax = textureless_region
        flat = (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax) & \
            (np.abs(z) < 1e-9)
        color[flat] = (0.55, 0.52, 0.50)
    return color


@dataclass
class RaycastResult:
    depth: np.ndarray       # camera z-depth, 0 where no hit
    hit: np.ndarray         # bool
    triangle: np.ndarray    # index of the nearest triangle, -1 where no hit
    points: np.ndarray      # world intersection points


def raycast(origin: np.ndarray, directions: np.ndarray, vertices: np.ndarray,
            triangles: np.ndarray, t_min: float = 1e-6) -> RaycastResult:
    """Nearest ray-triangle intersections for a bundle of rays.

    `directions` has shape (..., 3); the returned depth is the ray parameter,
    which equals camera z-depth when directions have unit forward component.
    """
    shape = directions.shape[:-1]
    dirs = directions.reshape(-1, 3)
    v0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - v0
    e2 = vertices[triangles[:, 2]] - v0
    s = origin[None, :] - v0                       # (T, 3)
    q = np.cross(s, e1)                            # (T, 3)
    t_num = np.einsum("tc,tc->t", e2, q)           # (T,)

    h = np.cross(dirs[:, None, :], e2[None, :, :])  # (P, T, 3)
    a = np.einsum("ptc,tc->pt", h, e1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = 1.0 / a
        u = f * np.einsum("tc,ptc->pt", s, h)
        v = f * np.einsum("pc,tc->pt", dirs, q)
        t = f * t_num[None, :]
    tol = 1e-9
    ok = (np.abs(a) > 1e-12) & (u >= -tol) & (v >= -tol) & \
        (u + v <= 1.0 + tol) & (t > t_min)
    t = np.where(ok, t, np.inf)
    best = np.argmin(t, axis=1)
    t_best = t[np.arange(len(dirs)), best]
    hit = np.isfinite(t_best)
    depth = np.where(hit, t_best, 0.0)
    tri = np.where(hit, best, -1)
    points = origin[None, :] + depth[:, None] * dirs
    points[~hit] = 0.0
    return RaycastResult(depth.reshape(shape), hit.reshape(shape),
                         tri.reshape(shape), points.reshape(shape + (3,)))


def _look_at_rotation(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation: x right, y down, z forward toward target."""
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, -1.0]))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / norm
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=-1)


def make_ring_views(config: SyntheticConfig) -> list:
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    f = config.focal_factor * size
    target = np.asarray(config.look_at, dtype=np.float64)
    views = []
    for i in range(config.num_views):
        angle = 2.0 * np.pi * i / config.num_views
        center = np.array([config.ring_radius * np.cos(angle),
                           config.ring_radius * np.sin(angle),
                           config.ring_height])
        jitter = config.principal_jitter * size
        cx = size / 2 + rng.uniform(-jitter, jitter)
        cy = size / 2 + rng.uniform(-jitter, jitter)
        K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
        views.append(CameraView(intrinsics=K,
                                rotation_c2w=_look_at_rotation(center, target),
                                camera_center=center, width=size, height=size))
    return views


def _transient_quad(view: CameraView, target: np.ndarray, drift: float):
    """A floating billboard between the camera and the desk."""
    center = target + 0.55 * (view.camera_center - target)
    right = view.rotation_c2w[:, 0]
    down = view.rotation_c2w[:, 1]
    center = center + drift * right + 0.1 * down
    u, v = 0.30 * right, 0.24 * down
    verts = np.stack([center - u - v, center + u - v,
                      center + u + v, center - u + v])
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return verts, tris


@dataclass
class SyntheticScene:
    config: SyntheticConfig
    vertices: np.ndarray
    triangles: np.ndarray
    views: list
    images: list                  # (H, W, 3) float in [0, 1]
    depths: list                  # ground-truth z-depth, 0 where background
    hits: list                    # bool visibility masks
    exposures: np.ndarray
    transient_regions: dict = field(default_factory=dict)

    def gt_cloud(self, count: int = 20000, seed: int = 0):
        """Area-weighted random surface points with their albedo colors."""
        points = sample_triangle_points(self.vertices, self.triangles, count,
                                        seed)
        return points, surface_color(points, self.config.textureless_region)

    def bundle(self, sparse_points: int = 2000, seed: int = 0) -> ColmapBundle:
        """Package views plus a sparse surface sampling like an SfM result."""
        points, colors = self.gt_cloud(sparse_points, seed)
        names = [f"view_{i:03d}.png" for i in range(len(self.views))]
        return ColmapBundle(views=list(self.views), image_names=names,
                            points=points, point_colors=colors)


def sample_triangle_points(vertices: np.ndarray, triangles: np.ndarray,
                           count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    corners = vertices[triangles]
    cross = np.cross(corners[:, 1] - corners[:, 0],
                     corners[:, 2] - corners[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    chosen = rng.choice(len(triangles), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    a, b, c = (corners[chosen, 0], corners[chosen, 1], corners[chosen, 2])
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + \
        (r1 * r2)[:, None] * c


def build_scene(config: SyntheticConfig = None) -> SyntheticScene:
    config = config or SyntheticConfig()
    vertices, triangles = desk_mesh(config.plane_half_extent)
    views = make_ring_views(config)
    rng = np.random.default_rng(config.seed + 1)

    if config.exposure_range is not None:
        exposures = rng.uniform(*config.exposure_range,
                                size=config.num_views)
    else:
        exposures = np.ones(config.num_views)

    images, depths, hits = [], [], []
    transient_regions = {}
    target = np.asarray(config.look_at, dtype=np.float64)
    for i, view in enumerate(views):
        rays = view.pixel_rays()
        cast = raycast(view.camera_center, rays, vertices, triangles)
        image = np.zeros(rays.shape)
        image[cast.hit] = surface_color(cast.points[cast.hit],
                                        config.textureless_region)
        if i in config.transient_views:
            k = sorted(config.transient_views).index(i)
            qv, qt = _transient_quad(view, target, drift=0.25 * k - 0.1)
            qcast = raycast(view.camera_center, rays, qv, qt)
            occludes = qcast.hit & (
                ~cast.hit | (qcast.depth < cast.depth))
            span = (qcast.points[occludes] - qv[0]) @ (qv[1] - qv[0])
            span = span / max(float((qv[1] - qv[0]) @ (qv[1] - qv[0])), 1e-12)
            image[occludes] = np.stack(
                [0.90 - 0.25 * span, 0.15 + 0.10 * span,
                 0.75 * np.ones_like(span)], axis=-1)
            transient_regions[i] = occludes
        image = np.clip(image * exposures[i], 0.0, 1.0)
        images.append(image)
        depths.append(cast.depth)
        hits.append(cast.hit)
    return SyntheticScene(config=config, vertices=vertices,
                          triangles=triangles, views=views, images=images,
                          depths=depths, hits=hits, exposures=exposures,
                          transient_regions=transient_regions)
