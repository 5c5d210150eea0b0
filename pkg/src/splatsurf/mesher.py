"""Depth-map fusion into a TSDF volume and triangle-mesh extraction.

The volume stores a truncated signed distance per grid node: positive in
observed empty space, negative behind surfaces.  Depth maps are fused by
projective lookup with a running average, and the zero level set is
extracted by marching cubes restricted to fully observed cells.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .mc_tables import EDGE_AXES, EDGES, TRI_TABLE
from .raster import RasterConfig, render
from .scene import CameraView, GaussianScene, SceneBounds

logger = logging.getLogger(__name__)

# grid nodes per integration slab, keeps projection buffers small
_SLAB_NODES = 2_000_000


class MeshingError(RuntimeError):
    pass


@dataclass
class MeshConfig:
    """Fusion parameters; voxel size defaults to scene diagonal / 256."""

    voxel_size: float = None
    truncation_voxels: float = 4.0
    max_voxels: int = 100_000_000
    alpha_threshold: float = 0.5
    mask_threshold: float = 0.5

    def validate(self) -> None:
        if self.voxel_size is not None and self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.truncation_voxels < 2.0:
            raise ValueError("truncation must be at least 2 voxels")
        if self.max_voxels < 8:
            raise ValueError("max_voxels too small for any volume")


class TsdfVolume:
    """Regular grid of truncated signed distances with fusion weights.

    Nodes sit at origin + index * voxel_size.  ``tsdf`` stays in [-1, 1]
    (distances are expressed in truncation units), ``weight`` counts the
    depth-map observations folded into each node.
    """

    def __init__(self, origin, voxel_size: float, dims, truncation: float):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.truncation = float(truncation)
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if any(d < 2 for d in self.dims):
            raise ValueError("volume needs at least 2 nodes per axis")
        if self.truncation < 2.0 * self.voxel_size:
            raise ValueError("truncation must be at least 2 voxels")
        self.tsdf = np.ones(self.dims)
        self.weight = np.zeros(self.dims)

    @classmethod
    def for_bounds(cls, bounds: SceneBounds, voxel_size: float,
                   truncation_voxels: float = 4.0,
                   max_voxels: int = None) -> "TsdfVolume":
        """A volume covering the bounds plus one truncation margin."""
        truncation = truncation_voxels * voxel_size
        origin = bounds.min - truncation
        span = bounds.max + truncation - origin
        dims = np.ceil(span / voxel_size).astype(np.int64) + 1
        if max_voxels is not None and int(np.prod(dims)) > max_voxels:
            raise MeshingError(
                f"volume of {dims[0]}x{dims[1]}x{dims[2]} nodes exceeds the "
                f"budget of {max_voxels}; increase the voxel size")
        return cls(origin, voxel_size, dims, truncation)

    def node_positions(self, flat_index: np.ndarray) -> np.ndarray:
        ny, nz = self.dims[1], self.dims[2]
        ix = flat_index // (ny * nz)
        iy = flat_index // nz % ny
        iz = flat_index % nz
        return self.origin + np.stack([ix, iy, iz], axis=-1) * self.voxel_size

    def integrate(self, depth: np.ndarray, view: CameraView,
                  valid: np.ndarray) -> None:
        """Fold one depth map into the volume.

        Each node in front of the camera looks up its pixel; where the
        pixel is valid and the node is not more than one truncation behind
        the surface, the clamped signed distance joins the running average
        and the weight grows by one.
        """
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if depth.shape != (view.height, view.width):
            raise ValueError("depth map does not match the view")
        if valid.shape != depth.shape:
            raise ValueError("validity mask does not match the depth map")
        fx, fy = view.fx, view.fy
        cx, cy = view.principal_point
        total = int(np.prod(self.dims))
        flat_tsdf = self.tsdf.reshape(-1)
        flat_weight = self.weight.reshape(-1)
        slab = max(1, _SLAB_NODES)
        for start in range(0, total, slab):
            idx = np.arange(start, min(start + slab, total))
            cam = view.world_to_camera(self.node_positions(idx))
            z = cam[:, 2]
            front = z > 1e-9
            z_safe = np.where(front, z, 1.0)
            px = np.floor(fx * cam[:, 0] / z_safe + cx).astype(np.int64)
            py = np.floor(fy * cam[:, 1] / z_safe + cy).astype(np.int64)
            hit = front & (px >= 0) & (px < view.width) & \
                (py >= 0) & (py < view.height)
            pxc = np.clip(px, 0, view.width - 1)
            pyc = np.clip(py, 0, view.height - 1)
            hit &= valid[pyc, pxc]
            sdf = depth[pyc, pxc] - z
            update = hit & (sdf > -self.truncation)
            if not update.any():
                continue
            rows = idx[update]
            value = np.clip(sdf[update] / self.truncation, -1.0, 1.0)
            w = flat_weight[rows]
            flat_tsdf[rows] = (flat_tsdf[rows] * w + value) / (w + 1.0)
            flat_weight[rows] = w + 1.0

    def validate(self) -> None:
        if np.abs(self.tsdf).max() > 1.0 + 1e-12:
            raise ValueError("tsdf left [-1, 1]")
        if self.weight.min() < 0:
            raise ValueError("negative fusion weight")


@dataclass
class TriangleMesh:
    vertices: np.ndarray      # (V, 3) float
    triangles: np.ndarray     # (T, 3) int vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices,
                                   dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles,
                                    dtype=np.int64).reshape(-1, 3)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return np.cross(b - a, c - a)

    def save_ply(self, path) -> None:
        """Binary little-endian PLY with positions and triangle indices."""
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(self.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(self.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n")
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(self.vertices.astype("<f4").tobytes())
            for tri in self.triangles:
                fh.write(struct.pack("<B3i", 3, *tri))

    def save_obj(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for tri in self.triangles:
                fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def load_ply(path) -> TriangleMesh:
    """Reads meshes written by save_ply (same fixed header layout)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    counts = {}
    for line in header:
        if line.startswith("element"):
            _, name, num = line.split()
            counts[name] = int(num)
    nv, nf = counts["vertex"], counts["face"]
    vertices = np.frombuffer(data, dtype="<f4", count=3 * nv,
                             offset=end).reshape(nv, 3)
    faces = np.zeros((nf, 3), dtype=np.int64)
    offset = end + 12 * nv
    for i in range(nf):
        count = data[offset]
        if count != 3:
            raise MeshingError("only triangle faces are supported")
        faces[i] = struct.unpack_from("<3i", data, offset + 1)
        offset += 13
    return TriangleMesh(vertices.astype(np.float64), faces)


def marching_cubes(volume: TsdfVolume) -> TriangleMesh:
    """Extract the zero level set of the fused distance field.

    Runs the 256-case table with linear interpolation along crossing
    edges.  Only cells whose 8 corners all carry observation weight emit
    triangles; shared edge crossings are welded through a global edge key,
    and windings face the direction of increasing distance (outward).  A
    volume with no sign change yields an empty mesh.
    """
    tsdf, weight = volume.tsdf, volume.weight
    nx, ny, nz = volume.dims
    if min(nx, ny, nz) < 2:
        return TriangleMesh.empty()
    inside = tsdf < 0.0
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    observed = np.ones_like(case, dtype=bool)
    for bit, (dx, dy, dz) in enumerate(
            ((0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0),
             (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1))):
        corner = (slice(dx, nx - 1 + dx), slice(dy, ny - 1 + dy),
                  slice(dz, nz - 1 + dz))
        case |= inside[corner].astype(np.uint16) << bit
        observed &= weight[corner] > 0
    active = np.argwhere(observed & (case != 0) & (case != 255))

    vertex_ids: dict = {}
    vertices: list = []
    triangles: list = []
    for ix, iy, iz in active:
        cell_case = int(case[ix, iy, iz])
        corner_vals = tsdf[ix:ix + 2, iy:iy + 2, iz:iz + 2]
        cell_vertex = {}
        for tri in TRI_TABLE[cell_case]:
            ids = []
            for edge in tri:
                vid = cell_vertex.get(edge)
                if vid is None:
                    vid = _edge_vertex(volume, corner_vals, ix, iy, iz, edge,
                                       vertex_ids, vertices)
                    cell_vertex[edge] = vid
                ids.append(vid)
            triangles.append(ids)
    if not triangles:
        return TriangleMesh.empty()
    return TriangleMesh(np.array(vertices), np.array(triangles,
                                                     dtype=np.int64))


def _edge_vertex(volume, corner_vals, ix, iy, iz, edge, vertex_ids,
                 vertices) -> int:
    a, b = EDGES[edge]
    ca = (a & 1, a >> 1 & 1, a >> 2 & 1)
    key = (ix + ca[0], iy + ca[1], iz + ca[2], EDGE_AXES[edge])
    vid = vertex_ids.get(key)
    if vid is not None:
        return vid
    va = corner_vals[ca]
    vb = corner_vals[b & 1, b >> 1 & 1, b >> 2 & 1]
    t = va / (va - vb)
    node = np.array(key[:3], dtype=np.float64)
    node[EDGE_AXES[edge]] += t
    vertex_ids[key] = len(vertices)
    vertices.append(volume.origin + node * volume.voxel_size)
    return vertex_ids[key]


def fuse_scene(scene: GaussianScene, views, config: MeshConfig = None,
               masks=None, raster_config: RasterConfig = None
               ) -> TriangleMesh:
    """Render depth from every view, fuse, and extract the mesh.

    ``masks`` optionally holds one per-view static-probability map; pixels
    below the mask threshold are kept out of the fusion entirely.  The
    volume covers the scene bounds plus one truncation margin.
    """
    config = config or MeshConfig()
    config.validate()
    if not views:
        raise MeshingError("no views to fuse")
    bounds = scene.bounds()
    voxel = config.voxel_size or bounds.diagonal / 256.0
    volume = TsdfVolume.for_bounds(bounds, voxel, config.truncation_voxels,
                                   config.max_voxels)
    raster_config = raster_config or RasterConfig()
    for i, view in enumerate(views):
        out = render(scene, view, raster_config)
        valid = out.valid_depth & (out.alpha >= config.alpha_threshold)
        if masks is not None and masks[i] is not None:
            valid &= np.asarray(masks[i]) >= config.mask_threshold
        volume.integrate(out.depth, view, valid)
        logger.info("fused view %d/%d", i + 1, len(views))
    return marching_cubes(volume)
