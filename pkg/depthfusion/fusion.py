"""Joint depth optimization across views.

Every foreground pixel depth is an unknown. With correspondences frozen, the
three energy terms (fidelity to the predicted depths, tangent/normal
orthogonality inside each view, and depth plus tangent agreement with the
pixels a point lands on in other views) are squares of affine functions of
the depths, so each outer iteration is one sparse linear least-squares
solve. Correspondences are rebuilt from the new depths between iterations;
only pairs accepted on the first pass can come back, and a pair that drops
out stays out.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy import sparse
from scipy.sparse.linalg import cg
from tqdm import tqdm

from .exceptions import FusionError
from .geometry import OrientedPointCloud, normalize_rows
from .logging_conf import logger
from .maps_io import MapSet
from .pointgen import silhouette_pixels
from .schemas import FusionConfig

CENTRAL = 0.5
ONE_SIDED = 1.0


def derivative_stencil(index_map: np.ndarray, axis: int):
    """First-derivative stencil for every pixel of an index map (-1 = background).

    Returns (plus, minus, coef, valid) arrays shaped like the map: the
    derivative is ``coef * (d[plus] - d[minus])``. Central difference when
    both neighbours along `axis` are foreground, one-sided when only one is,
    invalid when neither is. `axis` 1 is x (columns), 0 is y (rows).
    """
    padded = np.pad(index_map, 1, constant_values=-1)
    if axis == 1:
        after, before = padded[1:-1, 2:], padded[1:-1, :-2]
    else:
        after, before = padded[2:, 1:-1], padded[:-2, 1:-1]
    has_after = after >= 0
    has_before = before >= 0
    plus = np.where(has_after, after, index_map)
    minus = np.where(has_before, before, index_map)
    coef = np.where(has_after & has_before, CENTRAL, ONE_SIDED)
    valid = (index_map >= 0) & (has_after | has_before)
    return plus, minus, coef, valid


def tangents(depth, mask, kappa: float, i: int, j: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Surface tangents (t_x, t_y) at pixel (i, j) of one view, or None when either derivative is undefined."""
    mask = np.asarray(mask, dtype=bool)
    if not mask[j, i]:
        return None
    index_map = np.full(mask.shape, -1, dtype=np.int64)
    index_map[mask] = np.arange(np.count_nonzero(mask))
    values = np.asarray(depth, dtype=np.float64)[mask]
    derivatives = []
    for axis in (1, 0):
        plus, minus, coef, valid = derivative_stencil(index_map, axis)
        if not valid[j, i]:
            return None
        derivatives.append(coef[j, i] * (values[plus[j, i]] - values[minus[j, i]]))
    return np.array([kappa, 0.0, derivatives[0]]), np.array([0.0, kappa, derivatives[1]])


class PixelIndex:
    """Maps every foreground pixel of every view to one unknown, view-major then row-major."""

    def __init__(self, masks: Sequence[np.ndarray]):
        self.maps = []
        views, ii, jj, silhouette = [], [], [], []
        stencils = {axis: ([], [], [], []) for axis in (1, 0)}
        offset = 0
        self.offsets = []
        for v, mask in enumerate(masks):
            mask = np.asarray(mask, dtype=bool)
            j, i = np.nonzero(mask)
            index_map = np.full(mask.shape, -1, dtype=np.int64)
            index_map[j, i] = offset + np.arange(len(i))
            self.maps.append(index_map)
            self.offsets.append(offset)
            views.append(np.full(len(i), v, dtype=np.int64))
            ii.append(i)
            jj.append(j)
            silhouette.append(silhouette_pixels(mask)[j, i])
            for axis in (1, 0):
                for store, array in zip(stencils[axis], derivative_stencil(index_map, axis)):
                    store.append(array[j, i])
            offset += len(i)
        self.size = offset
        self.views = np.concatenate(views) if views else np.zeros(0, dtype=np.int64)
        self.i = np.concatenate(ii).astype(np.int64) if ii else np.zeros(0, dtype=np.int64)
        self.j = np.concatenate(jj).astype(np.int64) if jj else np.zeros(0, dtype=np.int64)
        self.silhouette = np.concatenate(silhouette) if silhouette else np.zeros(0, dtype=bool)
        self.x_plus, self.x_minus, self.x_coef, self.x_valid = (np.concatenate(a) for a in stencils[1])
        self.y_plus, self.y_minus, self.y_coef, self.y_valid = (np.concatenate(a) for a in stencils[0])

    def __len__(self):
        return self.size

    def view_slice(self, v: int) -> slice:
        end = self.offsets[v + 1] if v + 1 < len(self.offsets) else self.size
        return slice(self.offsets[v], end)

    def flatten(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        """Per-view (H, W[, C]) arrays to a vector over unknowns."""
        if self.size == 0:
            return np.zeros((0,) + np.asarray(arrays[0]).shape[2:])
        return np.concatenate([np.asarray(a)[self.j[self.view_slice(v)], self.i[self.view_slice(v)]]
                               for v, a in enumerate(arrays)]).astype(np.float64)

    def unflatten(self, values: np.ndarray, fill: float = 0.0) -> List[np.ndarray]:
        out = []
        for v, index_map in enumerate(self.maps):
            image = np.full(index_map.shape, fill, dtype=np.float64)
            s = self.view_slice(v)
            image[self.j[s], self.i[s]] = values[s]
            out.append(image)
        return out


class Correspondence(NamedTuple):
    source: Tuple[int, int, int]  # (view, i, j)
    target: Tuple[int, int, int]
    alpha: float
    beta: float
    landing: float
    normal: np.ndarray            # source normal in the target camera frame


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Accepted cross-view pixel pairs.

    The source point projects into the target view at depth ``alpha * d_source + beta``.
    It lands off the target pixel centre; ``landing`` is the depth change from the
    centre to the landing point along the target's tangent plane, so the
    consistency residual is ``d_target + landing - alpha * d_source - beta``.
    """

    source: np.ndarray  # unknown indices
    target: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    landing: np.ndarray
    normal: np.ndarray  # (K, 3)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0),
                   np.zeros(0), np.zeros((0, 3)))

    def __len__(self):
        return len(self.source)

    def describe(self, index: PixelIndex, k: int) -> Correspondence:
        s, t = self.source[k], self.target[k]
        return Correspondence((int(index.views[s]), int(index.i[s]), int(index.j[s])),
                              (int(index.views[t]), int(index.i[t]), int(index.j[t])),
                              float(self.alpha[k]), float(self.beta[k]), float(self.landing[k]), self.normal[k])

    def pairs(self, index: PixelIndex) -> np.ndarray:
        """(source unknown, target view) keys, one row per correspondence."""
        return np.stack([self.source, index.views[self.target]], axis=1)


def _rounded_projection(camera, points):
    px, py, d = camera.project(points)
    return np.floor(px + 0.5).astype(np.int64), np.floor(py + 0.5).astype(np.int64), d


def _view_correspondences(mapset, index, depths, normals, config, tau, allowed, v):
    s = index.view_slice(v)
    if s.stop == s.start:
        return CorrespondenceSet.empty()
    camera = mapset.rig[v]
    src = np.arange(s.start, s.stop)
    x, y = camera.pixel_to_camera(index.i[s], index.j[s])
    points = camera.unproject(index.i[s], index.j[s], depths[s])
    kappa = mapset.rig.kappa
    min_facing = np.cos(np.radians(config.grazing_angle))
    min_agreement = np.cos(np.radians(config.normal_agreement))
    chunks = []
    for w, other in enumerate(mapset.rig):
        if w == v:
            continue
        px, py, projected = other.project(points)
        pi, pj = np.floor(px + 0.5).astype(np.int64), np.floor(py + 0.5).astype(np.int64)
        inside = (pi >= 0) & (pi < other.width) & (pj >= 0) & (pj < other.height)
        target = np.full(len(src), -1, dtype=np.int64)
        target[inside] = index.maps[w][pj[inside], pi[inside]]
        ok = target >= 0
        if allowed is not None:
            ok &= allowed[w][src - s.start]
        target_normal = np.zeros((len(src), 3))
        target_normal[ok] = normals[target[ok]]
        ok &= target_normal[:, 2] > min_facing
        rotated = normals[src] @ camera.rotation.T @ other.rotation
        ok &= np.einsum("ij,ij->i", rotated, target_normal) >= min_agreement
        # tangent plane of the target pixel: d changes by -kappa * n_xy / n_z per pixel
        landing = np.zeros(len(src))
        landing[ok] = -kappa * ((px[ok] - pi[ok]) * target_normal[ok, 0]
                                + (py[ok] - pj[ok]) * target_normal[ok, 1]) / target_normal[ok, 2]
        ok[ok] = np.abs(depths[target[ok]] + landing[ok] - projected[ok]) < tau
        if not np.any(ok):
            continue
        z_other = other.rotation[:, 2]
        alpha = float(z_other @ camera.rotation[:, 2])
        offset = (np.outer(x[ok], camera.rotation[:, 0]) + np.outer(y[ok], camera.rotation[:, 1])
                  + camera.translation - other.translation)
        beta = offset @ z_other
        chunks.append((src[ok], target[ok], np.full(int(ok.sum()), alpha), beta, landing[ok], rotated[ok]))
    if not chunks:
        return CorrespondenceSet.empty()
    return CorrespondenceSet(*(np.concatenate(parts) for parts in zip(*chunks)))


def _allowed_pairs(index: PixelIndex, previous: CorrespondenceSet, view_count: int, v: int):
    """Per target view, which source pixels of view `v` held a correspondence last time."""
    s = index.view_slice(v)
    keys = previous.pairs(index)
    allowed = [np.zeros(s.stop - s.start, dtype=bool) for _ in range(view_count)]
    mine = (keys[:, 0] >= s.start) & (keys[:, 0] < s.stop)
    for w in range(view_count):
        allowed[w][keys[mine & (keys[:, 1] == w), 0] - s.start] = True
    return allowed


def build_correspondences(mapset: MapSet, config: FusionConfig, index: Optional[PixelIndex] = None,
                          depths: Optional[np.ndarray] = None, threads: int = 1,
                          previous: Optional[CorrespondenceSet] = None) -> CorrespondenceSet:
    """Pixels whose 3D point lands, unoccluded, on a foreground pixel of another view.

    The landing pixel is the rounded projection. A pair is accepted when the
    target pixel faces its camera within the grazing angle, the two normals
    agree, and the target depth carried to the landing point along its tangent
    plane is within the occlusion threshold of the projected depth. With
    `previous` given, only (source pixel, target view) pairs it holds may be
    accepted again.
    """
    index = index or PixelIndex([maps.mask for maps in mapset.views])
    if depths is None:
        depths = index.flatten([maps.depth for maps in mapset.views])
    normals = index.flatten([maps.normal for maps in mapset.views])
    tau = config.occlusion_threshold_for(mapset.rig.kappa)

    def view_pairs(v):
        allowed = None if previous is None else _allowed_pairs(index, previous, len(mapset), v)
        return _view_correspondences(mapset, index, depths, normals, config, tau, allowed, v)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(view_pairs, range(len(mapset))))
    parts = [p for p in parts if len(p)]
    if not parts:
        return CorrespondenceSet.empty()
    return CorrespondenceSet(*(np.concatenate([getattr(p, f) for p in parts])
                               for f in ("source", "target", "alpha", "beta", "landing", "normal")))


def remove_outliers(mapset: MapSet) -> Tuple[MapSet, int]:
    """Drop foreground pixels whose points land on background in most views that see them.

    Only views where the point projects inside the image vote; a point seen
    by no other view is kept. All decisions use the input masks (one pass).
    """
    keep = [maps.mask.copy() for maps in mapset.views]
    removed = 0
    for v, (camera, maps) in enumerate(zip(mapset.rig, mapset.views)):
        i, j = maps.foreground_pixels()
        if len(i) == 0:
            continue
        points = camera.unproject(i, j, maps.depth[j, i].astype(np.float64))
        in_bounds = np.zeros(len(i), dtype=np.int64)
        background = np.zeros(len(i), dtype=np.int64)
        for w, (other, other_maps) in enumerate(zip(mapset.rig, mapset.views)):
            if w == v:
                continue
            pi, pj, _ = _rounded_projection(other, points)
            inside = (pi >= 0) & (pi < other.width) & (pj >= 0) & (pj < other.height)
            in_bounds += inside
            background[inside] += ~other_maps.mask[pj[inside], pi[inside]]
        outlier = background * 2 > in_bounds
        keep[v][j[outlier], i[outlier]] = False
        removed += int(outlier.sum())
    if removed == 0:
        return mapset, 0
    views = [maps.replace(mask=mask) for maps, mask in zip(mapset.views, keep)]
    logger.info("Removed outlier pixels", extra={"removed": removed})
    return mapset.with_views(views), removed


class EnergyTerms(NamedTuple):
    e_net: float
    e_orth: float
    e_cons: float
    total: float


def _tangent_residuals(index, depths, normals, kappa, rows):
    """(κ n_x + n_z ∂d/∂x, κ n_y + n_z ∂d/∂y) evaluated at unknowns `rows` with normals given per row."""
    dx = index.x_coef[rows] * (depths[index.x_plus[rows]] - depths[index.x_minus[rows]])
    dy = index.y_coef[rows] * (depths[index.y_plus[rows]] - depths[index.y_minus[rows]])
    return kappa * normals[:, 0] + normals[:, 2] * dx, kappa * normals[:, 1] + normals[:, 2] * dy


def _orthogonality_rows(index: PixelIndex) -> np.ndarray:
    return np.flatnonzero(~index.silhouette & index.x_valid & index.y_valid)


def _consistency_tangent_mask(index: PixelIndex, correspondences: CorrespondenceSet) -> np.ndarray:
    t = correspondences.target
    return ~index.silhouette[t] & index.x_valid[t] & index.y_valid[t]


def energy(mapset: MapSet, depths, correspondences: CorrespondenceSet, config: FusionConfig,
           index: Optional[PixelIndex] = None) -> EnergyTerms:
    """Energy terms for a depth assignment (vector over unknowns), evaluated term by term."""
    index = index or PixelIndex([maps.mask for maps in mapset.views])
    depths = np.asarray(depths, dtype=np.float64)
    if index.size == 0:
        return EnergyTerms(0.0, 0.0, 0.0, 0.0)
    kappa = mapset.rig.kappa
    predicted = index.flatten([maps.depth for maps in mapset.views])
    normals = index.flatten([maps.normal for maps in mapset.views])

    e_net = config.w1 * float(np.sum((depths - predicted) ** 2))
    rows = _orthogonality_rows(index)
    rx, ry = _tangent_residuals(index, depths, normals[rows], kappa, rows)
    e_orth = config.w2 * float(np.sum(rx ** 2) + np.sum(ry ** 2))

    c = correspondences
    depth_gap = depths[c.target] + c.landing - (c.alpha * depths[c.source] + c.beta)
    e_cons = config.w3 * float(np.sum(depth_gap ** 2))
    usable = _consistency_tangent_mask(index, c)
    rx, ry = _tangent_residuals(index, depths, c.normal[usable], kappa, c.target[usable])
    e_cons += config.w4 * float(np.sum(rx ** 2) + np.sum(ry ** 2))
    return EnergyTerms(e_net, e_orth, e_cons, e_net + e_orth + e_cons)


class _Rows:
    def __init__(self):
        self.rows, self.cols, self.vals, self.rhs = [], [], [], []
        self.count = 0

    def add(self, columns, values, rhs):
        """One equation per entry of `rhs`; `columns`/`values` are lists of equally long arrays."""
        n = len(rhs)
        ids = self.count + np.arange(n)
        for col, val in zip(columns, values):
            self.rows.append(ids)
            self.cols.append(np.asarray(col, dtype=np.int64))
            self.vals.append(np.broadcast_to(np.asarray(val, dtype=np.float64), (n,)))
        self.rhs.append(np.asarray(rhs, dtype=np.float64))
        self.count += n

    def tangent_rows(self, index, targets, normals, kappa, scale):
        for axis, (plus, minus, coef) in enumerate(((index.x_plus, index.x_minus, index.x_coef),
                                                    (index.y_plus, index.y_minus, index.y_coef))):
            k = scale * normals[:, 2] * coef[targets]
            self.add([plus[targets], minus[targets]], [k, -k], -scale * kappa * normals[:, axis])

    def build(self, size):
        if not self.rhs:
            return sparse.csr_matrix((0, size)), np.zeros(0)
        matrix = sparse.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.count, size)).tocsr()
        matrix.sum_duplicates()
        return matrix, np.concatenate(self.rhs)


@dataclass(frozen=True, eq=False)
class FusionSystem:
    """Frozen-correspondence least-squares system: energy(D) = ||A D - b||^2."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    orthogonality_pixels: np.ndarray  # unknowns owning E_orth rows

    @classmethod
    def assemble(cls, mapset: MapSet, index: PixelIndex, correspondences: CorrespondenceSet,
                 config: FusionConfig) -> "FusionSystem":
        kappa = mapset.rig.kappa
        predicted = index.flatten([maps.depth for maps in mapset.views])
        normals = index.flatten([maps.normal for maps in mapset.views])
        rows = _Rows()
        unknowns = np.arange(index.size)
        if config.w1 > 0.0:
            s = np.sqrt(config.w1)
            rows.add([unknowns], [s], s * predicted)
        orth = _orthogonality_rows(index)
        if config.w2 > 0.0 and len(orth):
            rows.tangent_rows(index, orth, normals[orth], kappa, np.sqrt(config.w2))
        c = correspondences
        if config.w3 > 0.0 and len(c):
            s = np.sqrt(config.w3)
            rows.add([c.target, c.source], [s, -s * c.alpha], s * (c.beta - c.landing))
        usable = _consistency_tangent_mask(index, c)
        if config.w4 > 0.0 and np.any(usable):
            rows.tangent_rows(index, c.target[usable], c.normal[usable], kappa, np.sqrt(config.w4))
        matrix, rhs = rows.build(index.size)
        return cls(matrix, rhs, orth)

    def residual(self, depths) -> np.ndarray:
        return self.matrix @ depths - self.rhs

    def energy(self, depths) -> float:
        r = self.residual(depths)
        return float(r @ r)

    def energy_gradient(self, depths) -> np.ndarray:
        return 2.0 * (self.matrix.T @ self.residual(depths))

    def normal_equations(self):
        return (self.matrix.T @ self.matrix).tocsr(), self.matrix.T @ self.rhs

    def solve(self, start, tolerance: float, max_iterations: int):
        """Jacobi-preconditioned CG on the normal equations, warm-started at `start`.

        Returns (solution, relative residual, iterations, converged).
        """
        normal, rhs = self.normal_equations()
        diagonal = normal.diagonal()
        inverse = np.ones_like(diagonal)
        inverse[diagonal > 0.0] = 1.0 / diagonal[diagonal > 0.0]
        preconditioner = sparse.diags(inverse)
        iterations = [0]

        def count(_):
            iterations[0] += 1

        solution, info = cg(normal, rhs, x0=np.asarray(start, dtype=np.float64), rtol=tolerance, atol=0.0,
                            maxiter=max_iterations, M=preconditioner, callback=count)
        if not np.all(np.isfinite(solution)):
            raise FusionError("linear solve produced non-finite depths")
        scale = float(np.linalg.norm(rhs)) or 1.0
        relative = float(np.linalg.norm(rhs - normal @ solution)) / scale
        return solution, relative, iterations[0], info == 0


class IterationRecord(BaseModel):
    iteration: int
    e_net: float
    e_orth: float
    e_cons: float
    total: float
    energy_before_solve: float
    correspondences: int
    outliers_removed: int
    residual: float
    cg_iterations: int
    cg_converged: bool
    reverted: bool = False


class FusionReport(BaseModel):
    unknowns: int = 0
    outliers_removed: int = 0
    iterations: List[IterationRecord] = []
    converged: bool = True
    warnings: List[str] = []

    @property
    def final_energy(self) -> float:
        return self.iterations[-1].total if self.iterations else 0.0

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


class FusionResult(NamedTuple):
    mapset: MapSet
    cloud: OrientedPointCloud
    report: FusionReport


def fused_point_cloud(mapset: MapSet, index: PixelIndex, depths: np.ndarray) -> OrientedPointCloud:
    points, normals = [], []
    for v, (camera, maps) in enumerate(zip(mapset.rig, mapset.views)):
        s = index.view_slice(v)
        points.append(camera.unproject(index.i[s], index.j[s], depths[s]).reshape(-1, 3))
        normals.append(maps.normal[index.j[s], index.i[s]].astype(np.float64) @ camera.rotation.T)
    if not points:
        return OrientedPointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return OrientedPointCloud(np.concatenate(points), normalize_rows(np.concatenate(normals)))


def solve_fusion(mapset: MapSet, config: FusionConfig, threads: int = 1) -> FusionResult:
    """Fuse all views into one consistent depth assignment and oriented cloud."""
    report = FusionReport()
    removed = 0
    if config.remove_outliers:
        mapset, removed = remove_outliers(mapset)
    report.outliers_removed = removed
    index = PixelIndex([maps.mask for maps in mapset.views])
    report.unknowns = index.size
    predicted = index.flatten([maps.depth for maps in mapset.views])
    depths = predicted.copy()
    logger.info("Fusion started", extra={"unknowns": index.size, "outliers_removed": removed,
                                         **config.model_dump(exclude={"occlusion_threshold"}),
                                         "occlusion_threshold": config.occlusion_threshold_for(mapset.rig.kappa)})

    previous_total = None
    correspondences = None
    for iteration in tqdm(range(config.outer_iterations), desc="Fusion iterations", disable=None):
        if index.size == 0:
            break
        correspondences = build_correspondences(mapset, config, index, depths, threads=threads,
                                                previous=correspondences)
        system = FusionSystem.assemble(mapset, index, correspondences, config)
        before = system.energy(depths)
        solution, residual, cg_iterations, cg_converged = system.solve(depths, config.cg_tolerance,
                                                                       config.cg_max_iterations)
        reverted = system.energy(solution) > before
        if reverted:
            solution = depths
            report.warnings.append(f"iteration {iteration}: solve raised the energy, kept previous depths")
            logger.warning("Solve raised the frozen energy; keeping previous depths", extra={"iteration": iteration})
        if not cg_converged:
            report.converged = False
            report.warnings.append(f"iteration {iteration}: CG stopped at {cg_iterations} iterations")
            logger.warning("CG did not reach tolerance", extra={"iteration": iteration, "residual": residual})
        depths = solution
        terms = energy(mapset, depths, correspondences, config, index)
        report.iterations.append(IterationRecord(
            iteration=iteration, e_net=terms.e_net, e_orth=terms.e_orth, e_cons=terms.e_cons, total=terms.total,
            energy_before_solve=before, correspondences=len(correspondences),
            outliers_removed=removed if iteration == 0 else 0, residual=residual,
            cg_iterations=cg_iterations, cg_converged=cg_converged, reverted=reverted))
        logger.info("Fusion iteration", extra=report.iterations[-1].model_dump())
        if previous_total is not None:
            change = abs(previous_total - terms.total) / max(previous_total, np.finfo(float).tiny)
            if change < config.energy_tolerance:
                break
        previous_total = terms.total

    depths = np.clip(depths, -1.0, 1.0)
    fused_depths = index.unflatten(depths)
    views = [maps.replace(depth=d) for maps, d in zip(mapset.views, fused_depths)]
    fused = mapset.with_views(views)
    cloud = fused_point_cloud(fused, index, depths)
    return FusionResult(fused, cloud, report)
