"""Shape comparison measures: surface distances, normal agreement, map errors and voxel IoU.

Surface measures compare sampled point sets. A mesh operand is sampled
area-uniformly with a fixed seed and queried by exact nearest surface
point; a point cloud operand is used as is and queried by nearest point.
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import MetricsError, VoxelizationError
from .geometry import OrientedPointCloud, TriangleMesh, sample_surface
from .logging_conf import logger
from .maps_io import MapSet
from .schemas import MetricParams

Shape = Union[TriangleMesh, OrientedPointCloud]

VOXEL_BOUNDS = (-1.0, 1.0)
MAX_VOTE_DISAGREEMENT = 0.005
# Voxel-centre lines are nudged off the lattice by irrational amounts so they miss mesh edges.
LINE_OFFSETS = (1e-7 * np.sqrt(2.0), 1e-7 * np.sqrt(3.0))


def _check_shape(shape: Shape, role: str):
    empty = shape.is_empty if isinstance(shape, TriangleMesh) else len(shape) == 0
    if empty:
        raise MetricsError(f"{role} shape is empty")


def _samples(shape: Shape, samples: int, seed: int) -> OrientedPointCloud:
    if isinstance(shape, TriangleMesh):
        return sample_surface(shape, samples, seed)
    return shape


def _brute_force_nearest_points(queries, points, chunk=256):
    best_d = np.empty(len(queries))
    best_i = np.empty(len(queries), dtype=np.int64)
    for first in range(0, len(queries), chunk):
        diff = queries[first:first + chunk, None, :] - points[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        best_i[first:first + chunk] = np.argmin(d, axis=1)
        best_d[first:first + chunk] = d[np.arange(len(d)), best_i[first:first + chunk]]
    return best_d, best_i


def nearest(queries, target: Shape, brute_force: bool = False):
    """Distance from each query to `target` and the target normal there (None for a cloud without normals)."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if isinstance(target, TriangleMesh):
        result = target.closest_points_brute_force(queries) if brute_force else target.closest_points(queries)
        return result.distances, result.normals
    if brute_force:
        distances, idx = _brute_force_nearest_points(queries, target.points)
    else:
        distances, idx = cKDTree(target.points).query(queries)
    normals = None if target.normals is None else target.normals[idx]
    return distances, normals


def chamfer(a: Shape, b: Shape, samples: int = 10000, seed: int = 0, directional: bool = False,
            brute_force: bool = False) -> float:
    """Mean nearest-surface distance, averaged over both directions unless `directional`."""
    _check_shape(a, "first")
    _check_shape(b, "second")
    a_to_b = float(np.mean(nearest(_samples(a, samples, seed).points, b, brute_force)[0]))
    if directional:
        return a_to_b
    b_to_a = float(np.mean(nearest(_samples(b, samples, seed + 1).points, a, brute_force)[0]))
    return 0.5 * (a_to_b + b_to_a)


def hausdorff(recon: Shape, ref: Shape, samples: int = 10000, seed: int = 0, brute_force: bool = False) -> float:
    """Largest distance from a reconstructed surface point to the reference (one direction only)."""
    _check_shape(recon, "reconstructed")
    _check_shape(ref, "reference")
    return float(np.max(nearest(_samples(recon, samples, seed).points, ref, brute_force)[0]))


def normal_distance(recon: Shape, ref: Shape, samples: int = 10000, seed: int = 0) -> float:
    """Mean angle in degrees between recon normals and the reference normal at the nearest point."""
    _check_shape(recon, "reconstructed")
    _check_shape(ref, "reference")
    cloud = _samples(recon, samples, seed)
    if cloud.normals is None:
        raise MetricsError("reconstructed shape carries no normals")
    _, ref_normals = nearest(cloud.points, ref)
    if ref_normals is None:
        raise MetricsError("reference shape carries no normals")
    cos = np.clip(np.einsum("ij,ij->i", cloud.normals, ref_normals), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))


def _check_same_layout(a: MapSet, b: MapSet):
    if not a.rig.same_layout(b.rig):
        raise MetricsError("map sets come from different rigs")


def depth_map_error(a: MapSet, b: MapSet) -> float:
    """Mean |d_a - d_b| over pixels foreground in both, averaged over views that share any."""
    _check_same_layout(a, b)
    per_view = []
    for va, vb in zip(a.views, b.views):
        both = va.mask & vb.mask
        if both.any():
            per_view.append(np.mean(np.abs(va.depth[both].astype(np.float64) - vb.depth[both].astype(np.float64))))
    return float(np.mean(per_view)) if per_view else 0.0


def normal_map_error(a: MapSet, b: MapSet) -> float:
    """Mean angle in degrees between camera-frame normals, over pixels foreground in both."""
    _check_same_layout(a, b)
    per_view = []
    for va, vb in zip(a.views, b.views):
        both = va.mask & vb.mask
        if both.any():
            na = va.normal[both].astype(np.float64)
            nb = vb.normal[both].astype(np.float64)
            cos = np.einsum("ij,ij->i", na, nb) / (np.linalg.norm(na, axis=1) * np.linalg.norm(nb, axis=1))
            per_view.append(np.degrees(np.mean(np.arccos(np.clip(cos, -1.0, 1.0)))))
    return float(np.mean(per_view)) if per_view else 0.0


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray  # (res, res, res) bool, indexed [x, y, z]
    lo: float = VOXEL_BOUNDS[0]
    hi: float = VOXEL_BOUNDS[1]

    def __post_init__(self):
        occupancy = np.asarray(self.occupancy, dtype=bool)
        if occupancy.ndim != 3 or len(set(occupancy.shape)) != 1 or occupancy.shape[0] < 2:
            raise MetricsError(f"voxel grid must be a cube of side >= 2, got {occupancy.shape}")
        object.__setattr__(self, "occupancy", occupancy)

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def voxel_size(self) -> float:
        return (self.hi - self.lo) / self.resolution

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.resolution) + 0.5) * self.voxel_size


def _axis_parity(corners, axis, resolution, lo, size):
    """Inside/outside by crossing parity along lines parallel to `axis` through every voxel centre."""
    u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
    eps_u, eps_v = LINE_OFFSETS
    diff = np.zeros((resolution, resolution, resolution + 1), dtype=np.int64)
    lines_k, lines_l, positions = [], [], []
    for tri in corners:
        u, v, w = tri[:, u_axis], tri[:, v_axis], tri[:, axis]
        det = (v[1] - v[2]) * (u[0] - u[2]) + (u[2] - u[1]) * (v[0] - v[2])
        if det == 0.0:
            continue
        k0 = max(int(np.ceil((u.min() - lo - eps_u) / size - 0.5)), 0)
        k1 = min(int(np.floor((u.max() - lo - eps_u) / size - 0.5)), resolution - 1)
        l0 = max(int(np.ceil((v.min() - lo - eps_v) / size - 0.5)), 0)
        l1 = min(int(np.floor((v.max() - lo - eps_v) / size - 0.5)), resolution - 1)
        if k1 < k0 or l1 < l0:
            continue
        kk, ll = np.meshgrid(np.arange(k0, k1 + 1), np.arange(l0, l1 + 1), indexing="ij")
        pu = lo + (kk.ravel() + 0.5) * size + eps_u
        pv = lo + (ll.ravel() + 0.5) * size + eps_v
        b0 = ((v[1] - v[2]) * (pu - u[2]) + (u[2] - u[1]) * (pv - v[2])) / det
        b1 = ((v[2] - v[0]) * (pu - u[2]) + (u[0] - u[2]) * (pv - v[2])) / det
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0.0) & (b1 >= 0.0) & (b2 >= 0.0)
        if np.any(inside):
            lines_k.append(kk.ravel()[inside])
            lines_l.append(ll.ravel()[inside])
            positions.append(b0[inside] * w[0] + b1[inside] * w[1] + b2[inside] * w[2])
    if positions:
        k = np.concatenate(lines_k)
        l = np.concatenate(lines_l)
        # first voxel centre strictly beyond the crossing
        m = np.clip(np.floor((np.concatenate(positions) - lo) / size - 0.5).astype(np.int64) + 1, 0, resolution)
        np.add.at(diff, (k, l, m), 1)
    parity = (np.cumsum(diff, axis=2)[:, :, :resolution] % 2).astype(bool)
    # (u, v, axis) -> (x, y, z)
    order = np.argsort([u_axis, v_axis, axis])
    return np.transpose(parity, order)


def _triangle_box_overlap(tri, centers, half):
    """Separating-axis test of one triangle against many axis-aligned cubes."""
    rel = tri[None, :, :] - centers[:, None, :]  # (K, 3, 3)
    lo = rel.min(axis=1)
    hi = rel.max(axis=1)
    overlap = np.all((lo <= half) & (hi >= -half), axis=1)
    edges = [tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]]
    normal = np.cross(edges[0], edges[1])
    axes = [normal] + [np.cross(e, a) for e in edges for a in np.eye(3)]
    for axis in axes:
        if not np.any(axis):
            continue
        projected = rel @ axis
        radius = half * np.abs(axis).sum()
        overlap &= (projected.min(axis=1) <= radius) & (projected.max(axis=1) >= -radius)
    return overlap


def _surface_voxels(corners, resolution, lo, size):
    occupancy = np.zeros((resolution,) * 3, dtype=bool)
    half = 0.5 * size
    for tri in corners:
        first = np.clip(np.floor((tri.min(axis=0) - lo) / size).astype(np.int64), 0, resolution - 1)
        last = np.clip(np.floor((tri.max(axis=0) - lo) / size).astype(np.int64), 0, resolution - 1)
        grid = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(first, last)], indexing="ij"),
                        axis=-1).reshape(-1, 3)
        hit = _triangle_box_overlap(tri, lo + (grid + 0.5) * size, half)
        occupancy[tuple(grid[hit].T)] = True
    return occupancy


def voxelize(mesh: TriangleMesh, resolution: int = 128, mode: str = "solid") -> VoxelGrid:
    """Occupancy over [-1, 1]^3.

    ``solid`` marks voxel centres inside the mesh by crossing parity along x,
    y and z lines, decided by majority; the mesh must be closed, and more than
    0.5% of voxels with split votes raises VoxelizationError. ``surface``
    marks every voxel a triangle touches.
    """
    if resolution < 2:
        raise MetricsError("voxel resolution must be at least 2")
    lo, hi = VOXEL_BOUNDS
    size = (hi - lo) / resolution
    corners = mesh.vertices[mesh.triangles]
    if mode == "surface":
        return VoxelGrid(_surface_voxels(corners, resolution, lo, size), lo, hi)
    if mode != "solid":
        raise MetricsError(f"unknown voxelization mode {mode!r}")
    votes = [_axis_parity(corners, axis, resolution, lo, size) for axis in range(3)]
    total = votes[0].astype(np.int8) + votes[1] + votes[2]
    split = np.count_nonzero((total != 0) & (total != 3)) / total.size
    if split > MAX_VOTE_DISAGREEMENT:
        raise VoxelizationError(
            f"axis votes disagree on {100.0 * split:.2f}% of voxels; the mesh is not closed, "
            "use surface mode instead")
    return VoxelGrid(total >= 2, lo, hi)


def volumetric_jaccard(a: VoxelGrid, b: VoxelGrid) -> float:
    """1 - IoU; two empty grids count as identical."""
    if a.resolution != b.resolution or (a.lo, a.hi) != (b.lo, b.hi):
        raise MetricsError("voxel grids differ in resolution or bounds")
    union = np.count_nonzero(a.occupancy | b.occupancy)
    if union == 0:
        return 0.0
    return 1.0 - np.count_nonzero(a.occupancy & b.occupancy) / union


def evaluate(recon: Shape, ref: Shape, params: MetricParams = MetricParams(), seed: int = 0,
             recon_maps: Optional[MapSet] = None, ref_maps: Optional[MapSet] = None) -> dict:
    """Every measure that applies to the given operands; inapplicable ones are None."""
    record = {
        "chamfer": chamfer(recon, ref, params.samples, seed, directional=params.directional_chamfer),
        "hausdorff": hausdorff(recon, ref, params.samples, seed),
        "normal_distance_deg": None,
        "depth_map_error": None,
        "normal_map_error_deg": None,
        "volumetric_jaccard": None,
    }
    recon_has_normals = isinstance(recon, TriangleMesh) or recon.normals is not None
    ref_has_normals = isinstance(ref, TriangleMesh) or ref.normals is not None
    if recon_has_normals and ref_has_normals:
        record["normal_distance_deg"] = normal_distance(recon, ref, params.samples, seed)
    if recon_maps is not None and ref_maps is not None:
        record["depth_map_error"] = depth_map_error(recon_maps, ref_maps)
        record["normal_map_error_deg"] = normal_map_error(recon_maps, ref_maps)
    if isinstance(recon, TriangleMesh) and isinstance(ref, TriangleMesh):
        record["volumetric_jaccard"] = volumetric_jaccard(
            voxelize(recon, params.voxel_resolution, params.voxel_mode),
            voxelize(ref, params.voxel_resolution, params.voxel_mode))
    logger.info("Metrics computed", extra={k: v for k, v in record.items() if v is not None})
    return record
