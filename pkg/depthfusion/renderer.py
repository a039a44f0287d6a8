"""Ground-truth map sets by ray casting a mesh through a rig, and controlled corruption of them."""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from .exceptions import ContourError, GeometryError
from .geometry import RigidTransform, TriangleMesh, normalize_rows
from .logging_conf import logger
from .maps_io import BACKGROUND_NORMAL, MapSet, ViewMaps
from .pointgen import EIGHT_CONNECTED
from .schemas import PerturbationSpec
from .views import OrthographicCamera, ViewRig

UNIT_SPHERE_SLACK = 1e-9


def render_view(mesh: TriangleMesh, camera: OrthographicCamera, smooth_normals: bool = False) -> ViewMaps:
    j, i = np.mgrid[0:camera.height, 0:camera.width]
    x, y = camera.pixel_to_camera(i.ravel(), j.ravel())
    # Ray origins sit on a plane in front of everything the unit sphere can hold.
    z0 = 2.0 + float(np.linalg.norm(camera.translation))
    origins = np.stack([x, y, np.full_like(x, z0)], axis=1) @ camera.rotation.T + camera.translation
    hits = mesh.intersect_rays(origins, camera.view_direction, smooth_normals=smooth_normals)

    depth = np.zeros(len(x))
    normal = np.tile(np.asarray(BACKGROUND_NORMAL), (len(x), 1))
    depth[hits.hit] = z0 - hits.t[hits.hit]
    cam_normals = hits.normals[hits.hit] @ camera.rotation
    cam_normals[cam_normals[:, 2] < 0.0] *= -1.0
    normal[hits.hit] = cam_normals
    shape = (camera.height, camera.width)
    return ViewMaps(depth.reshape(shape), normal.reshape(shape + (3,)), hits.hit.reshape(shape))


def render_mapset(mesh: TriangleMesh, rig: ViewRig, smooth_normals: bool = False, threads: int = 1) -> MapSet:
    """Orthographic depth/normal/mask maps for every rig camera.

    The mesh must lie inside the unit sphere so that every depth lands in
    [-1, 1]. Views render on a thread pool; results come back in view order,
    so the thread count never changes the output.
    """
    if mesh.is_empty:
        raise GeometryError("cannot render an empty mesh")
    radius = float(np.linalg.norm(mesh.vertices, axis=1).max())
    if radius > 1.0 + UNIT_SPHERE_SLACK:
        raise GeometryError(f"mesh extends to radius {radius:.6f}, outside the unit view sphere")
    mesh.bvh  # build once before the pool shares it
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        views = list(tqdm(
            pool.map(lambda camera: render_view(mesh, camera, smooth_normals), rig.cameras),
            total=len(rig), desc="Rendering views", disable=None))
    mapset = MapSet(rig, tuple(views))
    logger.info("Rendered map set", extra={"views": len(rig), "foreground": mapset.foreground_count,
                                           "width": rig.width, "height": rig.height})
    return mapset


def draw_jitter(spec: PerturbationSpec, view_count: int):
    """Per-view rigid jitter: a rotation of exactly `jitter_degrees` about a random axis and a
    translation of length `jitter_translation` in a random direction. Views outside
    `jitter_views` (default: all but view 0) get the identity."""
    rng = np.random.default_rng([spec.seed, 1])
    chosen = set(range(1, view_count)) if spec.jitter_views is None else set(spec.jitter_views)
    transforms = []
    for v in range(view_count):
        axis = rng.normal(size=3)
        direction = rng.normal(size=3)
        if v not in chosen:
            transforms.append(RigidTransform.identity())
            continue
        direction *= spec.jitter_translation / np.linalg.norm(direction)
        transforms.append(RigidTransform.from_axis_angle(axis, spec.jitter_degrees, direction))
    return transforms


def _rotate_normals(normals, rng, sigma):
    axes = normalize_rows(rng.normal(size=normals.shape))
    angles = rng.normal(0.0, sigma, size=len(normals))
    return normalize_rows(Rotation.from_rotvec(axes * angles[:, None]).apply(normals))


def perturb_mapset(mapset: MapSet, spec: PerturbationSpec) -> MapSet:
    """Seeded depth bias/noise, normal noise and rig jitter; masks never change."""
    if spec.is_zero:
        return mapset
    rng = np.random.default_rng(spec.seed)
    views = []
    for maps in mapset.views:
        count = maps.foreground_count
        bias = rng.uniform(-spec.view_bias, spec.view_bias) if spec.view_bias > 0.0 else 0.0
        noise = rng.normal(0.0, spec.depth_noise, size=count) if spec.depth_noise > 0.0 else 0.0
        depth = maps.depth.astype(np.float64)
        depth[maps.mask] = np.clip(depth[maps.mask] + spec.depth_offset + bias + noise, -1.0, 1.0)
        normal = maps.normal.astype(np.float64)
        if spec.normal_noise > 0.0 and count:
            normal[maps.mask] = _rotate_normals(normal[maps.mask], rng, spec.normal_noise)
        views.append(ViewMaps(depth, normal, maps.mask))

    rig = mapset.rig
    if spec.has_jitter:
        jitter = draw_jitter(spec, len(rig))
        rig = rig.with_poses([j.compose(camera.pose) for j, camera in zip(jitter, rig)])
    logger.info("Perturbed map set", extra=spec.model_dump())
    return MapSet(rig, tuple(views))


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected foreground component (ties go to the first in scan order)."""
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def extract_silhouette_contour(mask) -> np.ndarray:
    """Ordered outer boundary of the largest foreground component, as (N, 2) pixel coordinates.

    The walk follows pixel edges counter-clockwise with foreground on the left,
    starting at the bottom edge of the lowest, then leftmost pixel. Diagonal
    contacts count as connected, so at a saddle corner the walk turns right.
    Each point is the midpoint of a boundary edge; pixel (i, j) spans
    [i - 0.5, i + 0.5] x [j - 0.5, j + 0.5].
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContourError("mask has no foreground pixels")
    component = np.pad(largest_component(mask), 1)

    def foreground(i, j):
        return component[j + 1, i + 1]

    rows, cols = np.nonzero(component)
    j0 = rows.min() - 1
    i0 = cols[rows == rows.min()].min() - 1

    start = (i0, j0, 1, 0)
    a, b, dx, dy = start
    points = []
    while True:
        points.append((a + 0.5 * dx - 0.5, b + 0.5 * dy - 0.5))
        a, b = a + dx, b + dy
        lx, ly = -dy, dx
        # lower-left lattice corner of the two pixels ahead of the vertex
        ahead_left = foreground(a + (dx + lx - 1) // 2, b + (dy + ly - 1) // 2)
        ahead_right = foreground(a + (dx - lx - 1) // 2, b + (dy - ly - 1) // 2)
        if ahead_right:
            dx, dy = dy, -dx
        elif not ahead_left:
            dx, dy = lx, ly
        if (a, b, dx, dy) == start:
            break
    return np.array(points, dtype=np.float64)
