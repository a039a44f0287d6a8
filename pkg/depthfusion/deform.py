"""Laplacian mesh deformation toward per-view silhouette contours."""
import json
import os
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .exceptions import ContourError, GeometryError
from .geometry import TriangleMesh
from .logging_conf import logger
from .maps_io import MapSet
from .renderer import extract_silhouette_contour
from .schemas import DeformWeights
from .views import OrthographicCamera, ViewRig

MIN_CONTOUR_POINTS = 8


@dataclass(frozen=True, eq=False)
class ContourView:
    view_index: int
    camera: OrthographicCamera
    points: np.ndarray  # (N, 2) pixel coordinates

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(points) < MIN_CONTOUR_POINTS:
            raise ContourError(f"view {self.view_index}: {len(points)} contour points, need {MIN_CONTOUR_POINTS}")
        object.__setattr__(self, "points", points)


@dataclass(frozen=True, eq=False)
class ContourConstraintSet:
    views: Tuple[ContourView, ...]

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)


def contours_from_mapset(mapset: MapSet, views: Sequence[int] = None) -> ContourConstraintSet:
    """External contours of the given views' masks (all views with foreground by default)."""
    chosen = range(len(mapset)) if views is None else views
    contour_views = []
    for v in chosen:
        if not mapset[v].mask.any():
            continue
        contour_views.append(ContourView(v, mapset.rig[v], extract_silhouette_contour(mapset[v].mask)))
    return ContourConstraintSet(tuple(contour_views))


def read_contours(path, rig: ViewRig) -> ContourConstraintSet:
    if not os.path.exists(path):
        raise ContourError(f"contour file not found: {path}")
    try:
        with open(path, "r") as f:
            records = json.load(f)
        views = tuple(ContourView(int(r["view_index"]), rig[int(r["view_index"])], r["points"]) for r in records)
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ContourError(f"{path}: malformed contour file: {e}")
    return ContourConstraintSet(views)


def write_contours(path, constraints: ContourConstraintSet):
    records = [{"view_index": c.view_index, "points": c.points.tolist()} for c in constraints]
    with open(path, "w") as f:
        json.dump(records, f)


def _edges(mesh: TriangleMesh):
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    return np.sort(edges, axis=1)


def uniform_laplacian(mesh: TriangleMesh) -> sparse.csr_matrix:
    """L = I - D^-1 A over the edge graph: row i is v_i minus the mean of its neighbours."""
    n = len(mesh.vertices)
    edges = np.unique(_edges(mesh), axis=0)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adjacency = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    isolated = np.flatnonzero(degree == 0)
    if len(isolated):
        raise GeometryError(f"{len(isolated)} isolated vertex(es), first index {isolated[0]}")
    return (sparse.identity(n, format="csr") - sparse.diags(1.0 / degree) @ adjacency).tocsr()


def silhouette_vertices(mesh: TriangleMesh, camera: OrthographicCamera) -> np.ndarray:
    """Vertices touching both a front- and a back-facing triangle, plus open-boundary vertices."""
    n = len(mesh.vertices)
    front = mesh.face_normals @ camera.z_axis > 0.0
    touches_front = np.zeros(n, dtype=bool)
    touches_back = np.zeros(n, dtype=bool)
    for k in range(3):
        touches_front[mesh.triangles[front, k]] = True
        touches_back[mesh.triangles[~front, k]] = True
    edges, counts = np.unique(_edges(mesh), axis=0, return_counts=True)
    boundary = np.zeros(n, dtype=bool)
    boundary[edges[counts == 1].ravel()] = True
    return np.flatnonzero((touches_front & touches_back) | boundary)


def nearest_silhouette_vertices(mesh: TriangleMesh, contour: ContourView):
    """For each contour point, its nearest projected silhouette vertex and the pixel distance to it.

    Returns (vertex indices, distances), or None when the view shows no silhouette.
    """
    candidates = silhouette_vertices(mesh, contour.camera)
    if len(candidates) == 0:
        return None
    px, py, _ = contour.camera.project(mesh.vertices[candidates])
    distances, nearest = cKDTree(np.stack([px, py], axis=1)).query(contour.points)
    return candidates[nearest], distances


def contour_residual(mesh: TriangleMesh, constraints: ContourConstraintSet) -> float:
    """Mean pixel distance from each contour point to its nearest projected silhouette vertex."""
    distances = []
    for contour in constraints:
        matched = nearest_silhouette_vertices(mesh, contour)
        if matched is not None:
            distances.append(matched[1])
    if not distances:
        raise ContourError("no view has silhouette vertices")
    return float(np.mean(np.concatenate(distances)))


def deform_to_contours(mesh: TriangleMesh, constraints: ContourConstraintSet,
                       weights: DeformWeights = DeformWeights()) -> TriangleMesh:
    """Move vertices so projected silhouettes meet the contours while keeping Laplacian coordinates.

    Minimizes ``w_lap |L V' - L V|^2 + w_con sum |xy_cam(v'_k) - c|^2 + anchor |V' - V|^2``;
    the small anchor term pins the otherwise free rigid and depth directions.
    Contour constraints touch only the two image-plane coordinates of a view.
    """
    n = len(mesh.vertices)
    original = mesh.vertices.reshape(-1)
    laplacian = sparse.kron(uniform_laplacian(mesh), sparse.identity(3), format="csr")
    lap_normal = laplacian.T @ laplacian
    base = weights.laplacian * lap_normal + weights.anchor * sparse.identity(3 * n, format="csr")
    base_rhs = weights.laplacian * (lap_normal @ original) + weights.anchor * original

    current = mesh
    for iteration in range(weights.iterations):
        rows, cols, vals, targets = [], [], [], []
        count = 0
        for contour in constraints:
            matched = nearest_silhouette_vertices(current, contour)
            if matched is None:
                logger.warning("View has no silhouette vertices; skipped", extra={"view": contour.view_index})
                continue
            claimed = matched[0]
            camera = contour.camera
            x, y = camera.pixel_to_camera(contour.points[:, 0], contour.points[:, 1])
            for axis, coord in ((0, x), (1, y)):
                direction = camera.rotation[:, axis]
                for a in range(3):
                    rows.append(count + np.arange(len(claimed)))
                    cols.append(3 * claimed + a)
                    vals.append(np.full(len(claimed), direction[a]))
                targets.append(coord + direction @ camera.translation)
                count += len(claimed)
        if count == 0 or weights.contour == 0.0:
            system, rhs = base, base_rhs
        else:
            constraint = sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(count, 3 * n))
            system = base + weights.contour * (constraint.T @ constraint)
            rhs = base_rhs + weights.contour * (constraint.T @ np.concatenate(targets))
        solution = spsolve(sparse.csc_matrix(system), rhs)
        if not np.all(np.isfinite(solution)):
            raise ContourError("deformation solve produced non-finite positions")
        current = TriangleMesh(solution.reshape(n, 3), mesh.triangles)
        logger.info("Contour deformation pass", extra={"iteration": iteration, "constraints": count,
                                                        "max_move": float(np.abs(solution - original).max())})
    return current
