import itertools
import json

import numpy as np
import pytest

from depthfusion.exceptions import RigError
from depthfusion.geometry import RigidTransform
from depthfusion.views import OrthographicCamera, ViewRig, icosahedron_rig, look_at_origin, project, unproject


def camera_256(pose=None):
    return OrthographicCamera(pose or RigidTransform.identity(), 2.0 / 256, 256, 256)


def test_rig_has_twelve_cameras_sharing_intrinsics():
    rig = icosahedron_rig(256, 256)
    assert len(rig) == 12
    assert rig.kappa == pytest.approx(2.0 / 256)
    assert all((c.width, c.height, c.kappa) == (256, 256, rig.kappa) for c in rig)


def test_view_directions_form_icosahedral_angles():
    rig = icosahedron_rig(32, 32)
    allowed = np.array([1.0, -1.0, 1.0 / np.sqrt(5.0), -1.0 / np.sqrt(5.0)])
    for a, b in itertools.product(rig, rig):
        dot = a.view_direction @ b.view_direction
        assert np.min(np.abs(allowed - dot)) < 1e-12


def test_cameras_look_at_origin_with_y_up():
    rig = icosahedron_rig(32, 32)
    for camera in rig:
        np.testing.assert_allclose(np.linalg.norm(camera.view_direction), 1.0)
        np.testing.assert_allclose(camera.translation, 0.0)
        # camera y lies in the plane of world +y and the view axis
        y = camera.rotation[:, 1]
        assert y @ np.array([0.0, 1.0, 0.0]) >= 0.0
        assert abs(np.cross(camera.z_axis, [0.0, 1.0, 0.0]) @ y) < 1e-12


def test_up_axis_falls_back_at_poles():
    rotation = look_at_origin((0.0, 1.0, 0.0), (0.0, 1.0, 0.0))
    RigidTransform(rotation, np.zeros(3))
    np.testing.assert_allclose(rotation[:, 2], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(rotation[:, 1], [1.0, 0.0, 0.0], atol=1e-12)


def test_unproject_examples():
    camera = camera_256()
    np.testing.assert_allclose(unproject(camera, 127.5, 127.5, 0.3), [0.0, 0.0, 0.3], atol=1e-15)
    np.testing.assert_allclose(unproject(camera, 255.5, 127.5, 0.0), [1.0, 0.0, 0.0], atol=1e-15)
    pose = RigidTransform.from_axis_angle((0.0, 1.0, 0.0), 90.0)
    np.testing.assert_allclose(unproject(camera_256(pose), 127.5, 127.5, 0.5),
                               pose.rotation @ np.array([0.0, 0.0, 0.5]), atol=1e-15)


def test_project_inverts_unproject():
    rng = np.random.default_rng(1)
    pose = RigidTransform.from_axis_angle(rng.normal(size=3), 40.0, rng.normal(size=3) * 0.1)
    camera = camera_256(pose)
    px, py = rng.uniform(0, 255, 100), rng.uniform(0, 255, 100)
    d = rng.uniform(-1, 1, 100)
    qx, qy, qd = project(camera, unproject(camera, px, py, d))
    np.testing.assert_allclose(qx, px, atol=1e-9)
    np.testing.assert_allclose(qy, py, atol=1e-9)
    np.testing.assert_allclose(qd, d, atol=1e-12)


def test_project_origin_lands_on_image_centre():
    px, py, d = project(camera_256(), np.zeros(3))
    assert (px, py, d) == (127.5, 127.5, 0.0)


def test_depth_of_shared_point_in_two_views():
    rig = icosahedron_rig(64, 64)
    point = np.array([0.1, -0.2, 0.3])
    for camera in (rig[0], rig[5]):
        _, _, d = camera.project(point)
        assert d == pytest.approx((camera.rotation.T @ point)[2])


def test_pixel_centres_span_image_plane():
    camera = camera_256()
    x, _ = camera.pixel_to_camera(np.array([0, 255]), np.array([0, 0]))
    np.testing.assert_allclose(x, [-1.0 + camera.kappa / 2, 1.0 - camera.kappa / 2])


def test_rig_json_round_trip_is_exact():
    rig = icosahedron_rig(40, 30)
    again = ViewRig.from_json(rig.to_json())
    assert rig.same_layout(again)
    for a, b in zip(rig, again):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.translation, b.translation)


def test_rig_json_keeps_up_axis():
    rig = icosahedron_rig(16, 16, up_axis=(0.0, 0.0, 1.0))
    again = ViewRig.from_json(rig.to_json())
    assert again.up_axis.tolist() == [0.0, 0.0, 1.0]
    legacy = json.loads(rig.to_json())
    del legacy["up_axis"]
    assert ViewRig.from_json(json.dumps(legacy)).up_axis.tolist() == [0.0, 1.0, 0.0]
    legacy["up_axis"] = [0.0, 1.0]
    with pytest.raises(RigError):
        ViewRig.from_json(json.dumps(legacy))


def test_rig_errors():
    with pytest.raises(RigError):
        icosahedron_rig(1, 64)
    with pytest.raises(RigError):
        ViewRig(())
    with pytest.raises(RigError):
        ViewRig((camera_256(), OrthographicCamera(RigidTransform.identity(), 0.1, 256, 256)))
    with pytest.raises(RigError):
        ViewRig.from_json('{"width": 8}')
