"""Rigid ICP and the round-robin rig alignment built on it.

With normals on both sides the objective is point-to-plane plus a light
point-to-point term, minimized by Gauss-Newton steps; bare point arrays fall
back to plain point-to-point (Kabsch) steps. The rejection radius shrinks
from coarse to fine, and a step is kept only when it lowers the RMS.
"""
import json
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .exceptions import IcpError
from .geometry import OrientedPointCloud, RigidTransform
from .logging_conf import logger
from .maps_io import MapSet
from .pointgen import PointSet
from .schemas import IcpParams

MIN_CORRESPONDENCES = 3
DEGENERATE_SPREAD = 1e-9
POINT_WEIGHT = 0.01  # share of the point-to-point term next to point-to-plane


class IcpResult(NamedTuple):
    transform: RigidTransform
    rms: Optional[float]  # None when nothing matched
    iterations: int
    matched: int
    converged: bool


@dataclass(frozen=True, eq=False)
class _Pairs:
    source: np.ndarray             # moved source positions
    target: np.ndarray
    normals: Optional[np.ndarray]  # target normals, when planes are in use

    def __len__(self):
        return len(self.source)

    def residuals(self) -> np.ndarray:
        """Per-pair residual: signed plane distance, or point distance without normals."""
        offsets = self.source - self.target
        if self.normals is None:
            return np.linalg.norm(offsets, axis=1)
        return np.einsum("ij,ij->i", offsets, self.normals)

    def rms(self) -> Optional[float]:
        if len(self) == 0:
            return None
        offsets = self.source - self.target
        squared = np.einsum("ij,ij->i", offsets, offsets)
        if self.normals is None:
            return float(np.sqrt(np.mean(squared)))
        return float(np.sqrt(np.mean(self.residuals() ** 2) + POINT_WEIGHT * np.mean(squared)))


def _oriented(points):
    if isinstance(points, PointSet):
        return points.positions, points.normals
    if isinstance(points, OrientedPointCloud):
        return points.points, points.normals
    return np.asarray(points, dtype=np.float64).reshape(-1, 3), None


def degeneracy(points) -> Optional[str]:
    """Why a point set cannot fix a rigid motion, or None when it can."""
    if len(points) < MIN_CORRESPONDENCES:
        return f"has {len(points)} points, need at least {MIN_CORRESPONDENCES}"
    singular = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if singular[1] <= DEGENERATE_SPREAD * max(1.0, singular[0]):
        return "points are collinear or coincident"
    return None


def best_rigid_fit(source, target) -> RigidTransform:
    """Least-squares rotation and translation taking `source` onto `target` (det +1 enforced)."""
    source_mean = source.mean(axis=0)
    target_mean = target.mean(axis=0)
    covariance = (source - source_mean).T @ (target - target_mean)
    u, _, vt = np.linalg.svd(covariance)
    reflection = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, reflection]) @ u.T
    # re-orthonormalize against round-off before validation
    u2, _, vt2 = np.linalg.svd(rotation)
    rotation = u2 @ vt2
    return RigidTransform(rotation, target_mean - rotation @ source_mean)


def plane_step(pairs: _Pairs) -> RigidTransform:
    """Gauss-Newton step for a small motion (omega, t) on the point-to-plane plus point-to-point objective."""
    p, q, n = pairs.source, pairs.target, pairs.normals
    offsets = p - q
    plane_rows = np.hstack([np.cross(p, n), n])
    skew = np.zeros((len(p), 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -p[:, 2], p[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = p[:, 2], -p[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = -p[:, 1], p[:, 0]
    # omega x p = -[p]x omega
    point_rows = np.concatenate([-skew, np.broadcast_to(np.eye(3), skew.shape)], axis=2).reshape(-1, 6)
    lhs = plane_rows.T @ plane_rows + POINT_WEIGHT * (point_rows.T @ point_rows)
    rhs = -(plane_rows.T @ np.einsum("ij,ij->i", offsets, n) + POINT_WEIGHT * (point_rows.T @ offsets.reshape(-1)))
    motion = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return RigidTransform(Rotation.from_rotvec(motion[:3]).as_matrix(), motion[3:])


def icp(source, target, params: IcpParams, workers: int = 1) -> IcpResult:
    """Align `source` onto `target`; every accepted step lowers the RMS by more than `rms_tolerance`.

    A source whose median residual at the start is within `settle_distance`
    is already aligned and comes back with the identity.
    """
    src, src_normals = _oriented(source)
    tgt, tgt_normals = _oriented(target)
    reason = degeneracy(src)
    if reason:
        raise IcpError(f"source {reason}")
    if len(tgt) == 0:
        raise IcpError("target is empty")
    tree = cKDTree(tgt)
    use_planes = src_normals is not None and tgt_normals is not None
    min_cos = np.cos(np.radians(params.normal_compatibility))

    def match(transform, limit) -> _Pairs:
        moved = transform.apply(src)
        dist, idx = tree.query(moved, distance_upper_bound=limit, workers=workers)
        valid = np.isfinite(dist)
        if not use_planes:
            return _Pairs(moved[valid], tgt[idx[valid]], None)
        normals = tgt_normals[idx[valid]]
        compatible = np.einsum("ij,ij->i", transform.apply_vectors(src_normals[valid]), normals) >= min_cos
        valid[valid] = compatible
        return _Pairs(moved[valid], tgt[idx[valid]], normals[compatible])

    step = plane_step if use_planes else (lambda pairs: best_rigid_fit(pairs.source, pairs.target))
    schedule = params.rejection_schedule()
    transform = RigidTransform.identity()
    pairs = match(transform, schedule[0])
    if len(pairs) < MIN_CORRESPONDENCES:
        logger.warning("ICP found no usable correspondences", extra={"matched": len(pairs)})
        return IcpResult(transform, pairs.rms(), 0, len(pairs), False)
    if params.settle_distance is not None and np.median(np.abs(pairs.residuals())) <= params.settle_distance:
        final = match(transform, schedule[-1])
        return IcpResult(transform, final.rms(), 0, len(final), True)

    iterations = 0
    converged = False
    for limit in schedule:
        pairs = match(transform, limit)
        if len(pairs) < MIN_CORRESPONDENCES:
            break
        rms = pairs.rms()
        converged = False
        for _ in range(params.max_iterations):
            iterations += 1
            candidate = step(pairs).compose(transform)
            c_pairs = match(candidate, limit)
            if len(c_pairs) < MIN_CORRESPONDENCES or c_pairs.rms() > rms - params.rms_tolerance:
                converged = True
                break
            transform, pairs, rms = candidate, c_pairs, c_pairs.rms()
    final = match(transform, schedule[-1])
    logger.debug("ICP finished", extra={"rms": final.rms(), "iterations": iterations, "matched": len(final)})
    return IcpResult(transform, final.rms(), iterations, len(final), converged)


def align_rig(sets: Sequence[PointSet], params: IcpParams, sweeps: int = 3, workers: int = 1) -> List[RigidTransform]:
    """Per-view transforms that make the sets mutually consistent; view 0 stays fixed.

    Each sweep visits views 1..n-1 in order and aligns the view against the
    union of all other views' current points. Transforms accumulate across
    sweeps. Views too small or too thin to fix a rigid motion are left alone.
    """
    transforms = [RigidTransform.identity() for _ in sets]
    non_empty = [s for s in sets if not s.is_empty]
    if len(non_empty) < 2:
        logger.warning("Fewer than two non-empty point sets; skipping alignment")
        return transforms
    current = list(sets)
    for sweep in range(sweeps):
        for v in range(1, len(sets)):
            if sets[v].is_empty:
                continue
            reason = degeneracy(sets[v].positions)
            if reason:
                logger.warning("View cannot be aligned; leaving it in place",
                               extra={"view": v, "sweep": sweep, "reason": reason})
                continue
            others = [current[u] for u in range(len(sets)) if u != v and not current[u].is_empty]
            if not others:
                continue
            union = OrientedPointCloud(np.concatenate([s.positions for s in others]),
                                       np.concatenate([s.normals for s in others]))
            result = icp(current[v], union, params, workers=workers)
            if result.matched < MIN_CORRESPONDENCES:
                logger.warning("View has no correspondences within the rejection distance",
                               extra={"view": v, "sweep": sweep})
                continue
            transforms[v] = result.transform.compose(transforms[v])
            current[v] = sets[v].transformed(transforms[v])
        logger.info("ICP sweep done", extra={
            "sweep": sweep,
            "max_angle_deg": max(float(np.degrees(t.rotation_angle())) for t in transforms),
            "max_shift": max(float(np.linalg.norm(t.translation)) for t in transforms),
        })
    return transforms


def apply_view_transforms(mapset: MapSet, transforms: Sequence[RigidTransform]) -> MapSet:
    """Fold per-view transforms into the camera poses (q' = T q), leaving the maps untouched."""
    return mapset.with_rig(mapset.rig.with_poses([t.compose(c.pose) for t, c in zip(transforms, mapset.rig)]))


def transforms_to_json(transforms: Sequence[RigidTransform]) -> str:
    records = []
    for view, transform in enumerate(transforms):
        record = {"view": view, "angle_degrees": float(np.degrees(transform.rotation_angle()))}
        record.update(transform.to_dict())
        records.append(record)
    return json.dumps(records, indent=2)
