"""Orthographic cameras and the 12-view icosahedron rig.

Camera frame: +z points from the object toward the camera, so larger depth
means nearer. Pixel (i, j) has its centre at continuous coordinates
(i, j); ``unproject`` maps it to camera-frame
``(κ(i + 0.5 − W/2), κ(j + 0.5 − H/2), d)`` and then to object space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np

from .exceptions import GeometryError, RigError
from .geometry import RigidTransform, as_vec3
from .shapes import icosahedron_vertices

RIG_VIEW_COUNT = 12
POLE_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class OrthographicCamera:
    pose: RigidTransform  # camera-to-object (R_v, e_v)
    kappa: float
    width: int
    height: int

    def __post_init__(self):
        if not self.kappa > 0.0:
            raise RigError(f"kappa must be positive, got {self.kappa}")
        if self.width < 2 or self.height < 2:
            raise RigError(f"image must be at least 2x2, got {self.width}x{self.height}")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.pose.translation

    @property
    def z_axis(self) -> np.ndarray:
        """Unit vector from the object toward the camera, in object space."""
        return self.pose.rotation[:, 2]

    @property
    def view_direction(self) -> np.ndarray:
        return -self.z_axis

    def pixel_to_camera(self, px, py) -> Tuple[np.ndarray, np.ndarray]:
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        return self.kappa * (px + 0.5 - self.width / 2.0), self.kappa * (py + 0.5 - self.height / 2.0)

    def camera_to_pixel(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        return x / self.kappa - 0.5 + self.width / 2.0, y / self.kappa - 0.5 + self.height / 2.0

    def unproject(self, px, py, depth) -> np.ndarray:
        """Object-space points, shape (..., 3)."""
        x, y = self.pixel_to_camera(px, py)
        cam = np.stack(np.broadcast_arrays(x, y, np.asarray(depth, dtype=np.float64)), axis=-1)
        return cam @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def project(self, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        cam = self.to_camera(points)
        px, py = self.camera_to_pixel(cam[..., 0], cam[..., 1])
        return px, py, cam[..., 2]

    def with_pose(self, pose: RigidTransform) -> "OrthographicCamera":
        return replace(self, pose=pose)


def unproject(camera: OrthographicCamera, p_x, p_y, d) -> np.ndarray:
    return camera.unproject(p_x, p_y, d)


def project(camera: OrthographicCamera, q):
    return camera.project(q)


def look_at_origin(position, up_axis) -> np.ndarray:
    """Rotation whose z column points at `position` and whose y column follows `up_axis`."""
    z = as_vec3(position)
    z = z / np.linalg.norm(z)
    up = as_vec3(up_axis)
    if np.linalg.norm(np.cross(z, up / np.linalg.norm(up))) < POLE_TOLERANCE:
        up = np.array([1.0, 0.0, 0.0])
    y = up - (up @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return np.column_stack([x, y, z])


@dataclass(frozen=True, eq=False)
class ViewRig:
    cameras: Tuple[OrthographicCamera, ...]
    up_axis: np.ndarray = np.array([0.0, 1.0, 0.0])

    def __post_init__(self):
        cameras = tuple(self.cameras)
        if not cameras:
            raise RigError("rig has no cameras")
        first = cameras[0]
        for index, camera in enumerate(cameras[1:], start=1):
            if (camera.kappa, camera.width, camera.height) != (first.kappa, first.width, first.height):
                raise RigError(f"camera {index} does not share kappa/width/height with camera 0")
        object.__setattr__(self, "cameras", cameras)
        object.__setattr__(self, "up_axis", as_vec3(self.up_axis))

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, index) -> OrthographicCamera:
        return self.cameras[index]

    def __iter__(self):
        return iter(self.cameras)

    @property
    def kappa(self) -> float:
        return self.cameras[0].kappa

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    def with_poses(self, poses: Sequence[RigidTransform]) -> "ViewRig":
        if len(poses) != len(self.cameras):
            raise RigError(f"{len(poses)} poses for {len(self.cameras)} cameras")
        return ViewRig(tuple(c.with_pose(p) for c, p in zip(self.cameras, poses)), self.up_axis)

    def same_layout(self, other: "ViewRig") -> bool:
        return (len(self), self.width, self.height, self.kappa) == (len(other), other.width, other.height, other.kappa)

    def to_json(self) -> str:
        def num(x):
            return format(float(x), ".17g")

        cams = []
        for camera in self.cameras:
            rotation = ", ".join(num(x) for x in camera.rotation.reshape(-1))
            translation = ", ".join(num(x) for x in camera.translation)
            cams.append(f'    {{"rotation": [{rotation}], "translation": [{translation}]}}')
        return (
            "{\n"
            f'  "width": {self.width},\n'
            f'  "height": {self.height},\n'
            f'  "kappa": {num(self.kappa)},\n'
            f'  "up_axis": [{", ".join(num(x) for x in self.up_axis)}],\n'
            '  "cameras": [\n' + ",\n".join(cams) + "\n  ]\n}\n"
        )

    @classmethod
    def from_json(cls, text: str) -> "ViewRig":
        try:
            data = json.loads(text)
            width, height, kappa = int(data["width"]), int(data["height"]), float(data["kappa"])
            cameras = tuple(
                OrthographicCamera(RigidTransform.from_dict(c), kappa, width, height) for c in data["cameras"]
            )
            # manifests written before the up axis was recorded
            up_axis = as_vec3(data.get("up_axis", (0.0, 1.0, 0.0)))
        except (KeyError, TypeError, ValueError, GeometryError) as e:
            raise RigError(f"malformed rig manifest: {e}")
        return cls(cameras, up_axis)


def icosahedron_rig(width: int = 256, height: int = 256, up_axis=(0.0, 1.0, 0.0)) -> ViewRig:
    """12 cameras on the unit icosahedron's vertices, each looking at the origin."""
    if width < 2 or height < 2:
        raise RigError(f"image must be at least 2x2, got {width}x{height}")
    kappa = 2.0 / min(width, height)
    cameras = tuple(
        OrthographicCamera(RigidTransform(look_at_origin(vertex, up_axis), np.zeros(3)), kappa, width, height)
        for vertex in icosahedron_vertices()
    )
    return ViewRig(cameras, np.asarray(up_axis, dtype=np.float64))
