"""Core 3D types and queries shared by every other module.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` (batches ``(N, 3)``).
``TriangleMesh`` owns a bounding-volume hierarchy that serves both
nearest-surface-point queries and ray casting; batched entry points
(``closest_points``, ``intersect_rays``) traverse it with whole packets of
queries at once so the per-node cost is paid in numpy, not in Python.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .exceptions import GeometryError
from .logging_conf import logger

MIN_TRIANGLE_AREA = 1e-12
BVH_LEAF_SIZE = 4
ORTHONORMAL_TOLERANCE = 1e-9


def as_vec3(value) -> np.ndarray:
    vec = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(vec)):
        raise GeometryError(f"non-finite vector {vec}")
    return vec


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norms > 0.0, norms, 1.0)


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = as_vec3(axis)
    norm = np.linalg.norm(axis)
    if norm == 0.0 or angle == 0.0:
        return np.eye(3)
    return Rotation.from_rotvec(axis * (angle / norm)).as_matrix()


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation, with rotation a proper rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = as_vec3(self.translation).copy()
        if not np.allclose(rotation.T @ rotation, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOLERANCE):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("rotation determinant is not +1")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, degrees: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_from_axis_angle(axis, np.radians(degrees)), translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def rotation_angle(self) -> float:
        """Rotation angle in radians."""
        return float(Rotation.from_matrix(self.rotation).magnitude())

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "RigidTransform":
        return cls(np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3), data["translation"])


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", points)
        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(points):
                raise GeometryError(f"{len(normals)} normals for {len(points)} points")
            object.__setattr__(self, "normals", normals)

    def __len__(self):
        return len(self.points)

    def transformed(self, transform: RigidTransform) -> "OrientedPointCloud":
        normals = None if self.normals is None else transform.apply_vectors(self.normals)
        return OrientedPointCloud(transform.apply(self.points), normals)


class SurfacePoint(NamedTuple):
    point: np.ndarray
    distance: float
    triangle: int
    normal: np.ndarray


class ClosestPoints(NamedTuple):
    points: np.ndarray
    distances: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray


class RayHit(NamedTuple):
    t: float
    point: np.ndarray
    normal: np.ndarray
    triangle: int


class RayHits(NamedTuple):
    hit: np.ndarray
    t: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray


def closest_point_weights(p, a, b, c):
    """Barycentric weights (wa, wb, wc) of the point of triangle abc closest to p.

    All arguments broadcast against each other over leading axes. Region
    logic follows the classic Voronoi-region walk; later regions in the
    cascade are overridden by earlier ones.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    bp = p - b
    cp = p - c
    d1 = np.einsum("...k,...k->...", ab, ap)
    d2 = np.einsum("...k,...k->...", ac, ap)
    d3 = np.einsum("...k,...k->...", ab, bp)
    d4 = np.einsum("...k,...k->...", ac, bp)
    d5 = np.einsum("...k,...k->...", ab, cp)
    d6 = np.einsum("...k,...k->...", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        wa = 1.0 - v_in - w_in
        wb = v_in
        wc = w_in

        # edge BC
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        region = (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0)
        wa = np.where(region, 0.0, wa)
        wb = np.where(region, 1.0 - w_bc, wb)
        wc = np.where(region, w_bc, wc)

        # edge AC
        w_ac = d2 / (d2 - d6)
        region = (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
        wa = np.where(region, 1.0 - w_ac, wa)
        wb = np.where(region, 0.0, wb)
        wc = np.where(region, w_ac, wc)

        # vertex C
        region = (d6 >= 0.0) & (d5 <= d6)
        wa = np.where(region, 0.0, wa)
        wb = np.where(region, 0.0, wb)
        wc = np.where(region, 1.0, wc)

        # edge AB
        v_ab = d1 / (d1 - d3)
        region = (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
        wa = np.where(region, 1.0 - v_ab, wa)
        wb = np.where(region, v_ab, wb)
        wc = np.where(region, 0.0, wc)

        # vertex B
        region = (d3 >= 0.0) & (d4 <= d3)
        wa = np.where(region, 0.0, wa)
        wb = np.where(region, 1.0, wb)
        wc = np.where(region, 0.0, wc)

        # vertex A
        region = (d1 <= 0.0) & (d2 <= 0.0)
        wa = np.where(region, 1.0, wa)
        wb = np.where(region, 0.0, wb)
        wc = np.where(region, 0.0, wc)
    return wa, wb, wc


def _squared_distance_to_triangles(p, a, b, c):
    wa, wb, wc = closest_point_weights(p, a, b, c)
    closest = wa[..., None] * a + wb[..., None] * b + wc[..., None] * c
    diff = p - closest
    return np.einsum("...k,...k->...", diff, diff), closest, np.stack([wa, wb, wc], axis=-1)


class _Bvh:
    """Flat bounding-volume hierarchy: median split on the longest centroid axis."""

    def __init__(self, corners: np.ndarray):
        count = len(corners)
        centroids = corners.mean(axis=1)
        lo_all = corners.min(axis=1)
        hi_all = corners.max(axis=1)
        order = np.arange(count)
        node_lo, node_hi, left, right, start, size = [], [], [], [], [], []

        def new_node(first, n):
            idx = order[first:first + n]
            lo = lo_all[idx].min(axis=0)
            hi = hi_all[idx].max(axis=0)
            pad = 1e-9 * (1.0 + np.abs(hi - lo))
            node_lo.append(lo - pad)
            node_hi.append(hi + pad)
            left.append(-1)
            right.append(-1)
            start.append(first)
            size.append(n)
            return len(node_lo) - 1

        stack = [new_node(0, count)] if count else []
        while stack:
            node = stack.pop()
            first, n = start[node], size[node]
            if n <= BVH_LEAF_SIZE:
                continue
            idx = order[first:first + n]
            cen = centroids[idx]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            ranked = idx[np.argsort(cen[:, axis], kind="stable")]
            order[first:first + n] = ranked
            half = n // 2
            left[node] = new_node(first, half)
            right[node] = new_node(first + half, n - half)
            stack.append(right[node])
            stack.append(left[node])

        self.order = order
        self.lo = np.array(node_lo).reshape(-1, 3)
        self.hi = np.array(node_hi).reshape(-1, 3)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.size = np.array(size, dtype=np.int64)

    def __len__(self):
        return len(self.lo)

    def leaf_triangles(self, node: int) -> np.ndarray:
        return self.order[self.start[node]:self.start[node] + self.size[node]]

    def covered_triangles(self) -> np.ndarray:
        leaves = np.flatnonzero(self.left < 0)
        if len(leaves) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([self.leaf_triangles(n) for n in leaves]))


class TriangleMesh:
    """Indexed triangle mesh, immutable after construction."""

    def __init__(self, vertices, triangles, vertex_normals=None):
        vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise GeometryError("mesh has non-finite vertex coordinates")
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise GeometryError("triangle index out of range")
        corners = vertices[triangles]
        cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        degenerate = np.flatnonzero(areas < MIN_TRIANGLE_AREA)
        if len(degenerate):
            raise GeometryError(f"{len(degenerate)} degenerate triangle(s), first index {degenerate[0]}")
        if vertex_normals is not None:
            vertex_normals = normalize_rows(np.array(vertex_normals, dtype=np.float64).reshape(-1, 3))
            if len(vertex_normals) != len(vertices):
                raise GeometryError("vertex normal count does not match vertex count")
            vertex_normals.flags.writeable = False

        face_normals = cross / np.where(areas > 0.0, 2.0 * areas, 1.0)[:, None]
        for array in (vertices, triangles, areas, face_normals, corners):
            array.flags.writeable = False
        self.vertices = vertices
        self.triangles = triangles
        self.vertex_normals = vertex_normals
        self.areas = areas
        self.face_normals = face_normals
        self._corners = corners

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @cached_property
    def bvh(self) -> _Bvh:
        return _Bvh(self._corners)

    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self._corners.mean(axis=1))

    @cached_property
    def area_weighted_vertex_normals(self) -> np.ndarray:
        accum = np.zeros_like(self.vertices)
        weighted = self.face_normals * self.areas[:, None]
        for k in range(3):
            np.add.at(accum, self.triangles[:, k], weighted)
        return normalize_rows(accum)

    def transformed(self, transform: RigidTransform) -> "TriangleMesh":
        normals = None if self.vertex_normals is None else transform.apply_vectors(self.vertex_normals)
        return TriangleMesh(transform.apply(self.vertices), self.triangles, normals)

    def _require_triangles(self):
        if self.is_empty:
            raise GeometryError("mesh has no triangles")

    def _surface_normals(self, triangles: np.ndarray, weights: np.ndarray) -> np.ndarray:
        if self.vertex_normals is None:
            return self.face_normals[triangles]
        corner_normals = self.vertex_normals[self.triangles[triangles]]
        return normalize_rows(np.einsum("nk,nkd->nd", weights, corner_normals))

    def closest_points(self, queries) -> ClosestPoints:
        """Exact nearest surface points for a batch of queries (BVH accelerated).

        Ties between equidistant triangles go to the lowest triangle index.
        """
        self._require_triangles()
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(queries)
        corners = self._corners
        # Seed the bound with the triangle whose centroid is nearest.
        _, seed = self._centroid_tree.query(queries)
        seed = np.asarray(seed, dtype=np.int64)
        best_d2, best_pt, best_w = _squared_distance_to_triangles(
            queries, corners[seed, 0], corners[seed, 1], corners[seed, 2])
        best_tri = seed.copy()

        bvh = self.bvh
        stack = [(0, np.arange(n))]
        while stack:
            node, active = stack.pop()
            q = queries[active]
            gap = np.maximum(bvh.lo[node] - q, 0.0) + np.maximum(q - bvh.hi[node], 0.0)
            box_d2 = np.einsum("ij,ij->i", gap, gap)
            active = active[box_d2 <= best_d2[active] * (1.0 + 1e-12) + 1e-300]
            if len(active) == 0:
                continue
            if bvh.left[node] >= 0:
                stack.append((bvh.right[node], active))
                stack.append((bvh.left[node], active))
                continue
            for tri in bvh.leaf_triangles(node):
                d2, pt, w = _squared_distance_to_triangles(
                    queries[active], corners[tri, 0], corners[tri, 1], corners[tri, 2])
                current = best_d2[active]
                better = (d2 < current) | ((d2 == current) & (tri < best_tri[active]))
                if np.any(better):
                    idx = active[better]
                    best_d2[idx] = d2[better]
                    best_pt[idx] = pt[better]
                    best_w[idx] = w[better]
                    best_tri[idx] = tri
        normals = self._surface_normals(best_tri, best_w)
        return ClosestPoints(best_pt, np.sqrt(best_d2), best_tri, normals)

    def closest_points_brute_force(self, queries, chunk: int = 32) -> ClosestPoints:
        """O(n·m) scan over every triangle; reference for the accelerated path."""
        self._require_triangles()
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        corners = self._corners
        points, dists, tris, weights = [], [], [], []
        for first in range(0, len(queries), chunk):
            q = queries[first:first + chunk, None, :]
            d2, pt, w = _squared_distance_to_triangles(q, corners[None, :, 0], corners[None, :, 1], corners[None, :, 2])
            best = np.argmin(d2, axis=1)
            rows = np.arange(len(best))
            points.append(pt[rows, best])
            dists.append(np.sqrt(d2[rows, best]))
            tris.append(best)
            weights.append(w[rows, best])
        if not points:
            empty = np.zeros((0, 3))
            return ClosestPoints(empty, np.zeros(0), np.zeros(0, dtype=np.int64), empty)
        tris = np.concatenate(tris).astype(np.int64)
        normals = self._surface_normals(tris, np.concatenate(weights))
        return ClosestPoints(np.concatenate(points), np.concatenate(dists), tris, normals)

    def intersect_rays(self, origins, directions, smooth_normals: bool = False) -> RayHits:
        """Nearest non-negative hit per ray, watertight ray/triangle test."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.broadcast_to(np.asarray(directions, dtype=np.float64), origins.shape)
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.int64)
        best_w = np.zeros((n, 3))
        if self.is_empty or n == 0:
            return RayHits(np.zeros(n, dtype=bool), best_t, np.zeros((n, 3)), np.zeros((n, 3)), best_tri)

        # Per-ray shear constants of the watertight test.
        kz = np.argmax(np.abs(directions), axis=1)
        kx = (kz + 1) % 3
        ky = (kx + 1) % 3
        dz_val = directions[np.arange(n), kz]
        swap = dz_val < 0.0
        kx, ky = np.where(swap, ky, kx), np.where(swap, kx, ky)
        rows = np.arange(n)
        shear_x = directions[rows, kx] / dz_val
        shear_y = directions[rows, ky] / dz_val
        shear_z = 1.0 / dz_val
        with np.errstate(divide="ignore"):
            safe = np.where(np.abs(directions) < 1e-300, np.copysign(1e-300, directions), directions)
            inv_dir = 1.0 / safe

        corners = self._corners
        bvh = self.bvh
        stack = [(0, np.arange(n))]
        while stack:
            node, active = stack.pop()
            o = origins[active]
            inv = inv_dir[active]
            t0 = (bvh.lo[node] - o) * inv
            t1 = (bvh.hi[node] - o) * inv
            t_near = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
            t_far = np.maximum(t0, t1).min(axis=1)
            active = active[(t_near <= t_far) & (t_near <= best_t[active])]
            if len(active) == 0:
                continue
            if bvh.left[node] >= 0:
                stack.append((bvh.right[node], active))
                stack.append((bvh.left[node], active))
                continue
            r = active
            kx_r = kx[r][:, None, None]
            ky_r = ky[r][:, None, None]
            kz_r = kz[r][:, None, None]
            for tri in bvh.leaf_triangles(node):
                # (rays, corner, xyz) relative to each ray origin, permuted per ray
                rel = corners[tri][None, :, :] - origins[r][:, None, :]
                px = np.take_along_axis(rel, kx_r, axis=2)[:, :, 0]
                py = np.take_along_axis(rel, ky_r, axis=2)[:, :, 0]
                pz = np.take_along_axis(rel, kz_r, axis=2)[:, :, 0]
                sx = px - shear_x[r][:, None] * pz
                sy = py - shear_y[r][:, None] * pz
                u = sx[:, 2] * sy[:, 1] - sy[:, 2] * sx[:, 1]
                v = sx[:, 0] * sy[:, 2] - sy[:, 0] * sx[:, 2]
                w = sx[:, 1] * sy[:, 0] - sy[:, 1] * sx[:, 0]
                outside = ((u < 0.0) | (v < 0.0) | (w < 0.0)) & ((u > 0.0) | (v > 0.0) | (w > 0.0))
                det = u + v + w
                sz = shear_z[r][:, None] * pz
                t_scaled = u * sz[:, 0] + v * sz[:, 1] + w * sz[:, 2]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = t_scaled / det
                ok = ~outside & (det != 0.0) & (t >= 0.0)
                current = best_t[r]
                better = ok & ((t < current) | ((t == current) & (tri < best_tri[r])))
                if np.any(better):
                    idx = r[better]
                    best_t[idx] = t[better]
                    best_tri[idx] = tri
                    best_w[idx] = np.stack([u, v, w], axis=1)[better] / det[better][:, None]

        hit = best_tri >= 0
        points = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        points[hit] = origins[hit] + best_t[hit][:, None] * directions[hit]
        if np.any(hit):
            if smooth_normals:
                vertex_normals = self.vertex_normals if self.vertex_normals is not None else self.area_weighted_vertex_normals
                corner_normals = vertex_normals[self.triangles[best_tri[hit]]]
                normals[hit] = normalize_rows(np.einsum("nk,nkd->nd", best_w[hit], corner_normals))
            else:
                normals[hit] = self.face_normals[best_tri[hit]]
        return RayHits(hit, best_t, points, normals, best_tri)


def nearest_surface_point(mesh: TriangleMesh, query) -> SurfacePoint:
    result = mesh.closest_points(as_vec3(query)[None, :])
    return SurfacePoint(result.points[0], float(result.distances[0]), int(result.triangles[0]), result.normals[0])


def ray_intersect(mesh: TriangleMesh, origin, direction) -> Optional[RayHit]:
    direction = as_vec3(direction)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise GeometryError("ray direction must be unit length")
    hits = mesh.intersect_rays(as_vec3(origin)[None, :], direction[None, :])
    if not hits.hit[0]:
        return None
    return RayHit(float(hits.t[0]), hits.points[0], hits.normals[0], int(hits.triangles[0]))


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> OrientedPointCloud:
    """Area-uniform samples; each sample carries its triangle's face normal."""
    if n < 1:
        raise GeometryError("sample count must be at least 1")
    total = float(mesh.areas.sum()) if not mesh.is_empty else 0.0
    if total <= 0.0:
        raise GeometryError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    triangles = rng.choice(len(mesh), size=n, p=mesh.areas / total)
    r1, r2 = rng.random((2, n))
    s = np.sqrt(r1)
    corners = mesh._corners[triangles]
    points = (
        (1.0 - s)[:, None] * corners[:, 0]
        + (s * (1.0 - r2))[:, None] * corners[:, 1]
        + (s * r2)[:, None] * corners[:, 2]
    )
    logger.debug("sampled surface", extra={"samples": n, "seed": seed})
    return OrientedPointCloud(points, mesh.face_normals[triangles])
