from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy import ndimage

from .geometry import OrientedPointCloud, RigidTransform, normalize_rows
from .maps_io import MapSet

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class PointSet:
    """Oriented points of one view, each tied to the foreground pixel it came from."""

    view: int
    positions: np.ndarray   # (N, 3) object space
    normals: np.ndarray     # (N, 3) object space, unit
    pixels: np.ndarray      # (N, 2) integer (i, j)
    silhouette: np.ndarray  # (N,) bool

    def __len__(self):
        return len(self.positions)

    @property
    def is_empty(self) -> bool:
        return len(self.positions) == 0

    def transformed(self, transform: RigidTransform) -> "PointSet":
        return PointSet(self.view, transform.apply(self.positions), transform.apply_vectors(self.normals),
                        self.pixels, self.silhouette)

    def to_cloud(self) -> OrientedPointCloud:
        return OrientedPointCloud(self.positions, self.normals)


def silhouette_pixels(mask) -> np.ndarray:
    """Foreground pixels with a background pixel (or the image border) among their 8 neighbours."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=EIGHT_CONNECTED, border_value=0)
    return mask & ~interior


def generate_points(mapset: MapSet) -> List[PointSet]:
    sets = []
    for v, (camera, maps) in enumerate(zip(mapset.rig, mapset.views)):
        i, j = maps.foreground_pixels()
        depth = maps.depth[j, i].astype(np.float64)
        positions = camera.unproject(i, j, depth).reshape(-1, 3)
        normals = normalize_rows(maps.normal[j, i].astype(np.float64) @ camera.rotation.T).reshape(-1, 3)
        silhouette = silhouette_pixels(maps.mask)[j, i]
        sets.append(PointSet(v, positions, normals, np.stack([i, j], axis=1).reshape(-1, 2), silhouette))
    return sets


def naive_point_cloud(sets: Sequence[PointSet]) -> OrientedPointCloud:
    """All per-view points concatenated in view order, with no fusion."""
    if not sets:
        return OrientedPointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return OrientedPointCloud(np.concatenate([s.positions for s in sets]),
                              np.concatenate([s.normals for s in sets]))
