import numpy as np
import pytest

from depthfusion.exceptions import GeometryError
from depthfusion.geometry import (
    OrientedPointCloud,
    RigidTransform,
    TriangleMesh,
    nearest_surface_point,
    ray_intersect,
    sample_surface,
)
from depthfusion.shapes import icosphere


def unit_square(centered=False):
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    if centered:
        vertices[:, :2] -= 0.5
    return TriangleMesh(vertices, [[0, 1, 2], [0, 2, 3]])


def random_transform(rng):
    return RigidTransform.from_axis_angle(rng.normal(size=3), rng.uniform(0.0, 180.0), rng.normal(size=3))


def test_axis_angle_rotation_and_its_angle():
    quarter = RigidTransform.from_axis_angle((0.0, 0.0, 2.0), 90.0)
    np.testing.assert_allclose(quarter.apply([[1.0, 0.0, 0.0]]), [[0.0, 1.0, 0.0]], atol=1e-15)
    assert quarter.rotation_angle() == pytest.approx(np.pi / 2.0)
    assert RigidTransform.from_axis_angle((0.0, 0.0, 0.0), 30.0).rotation_angle() == 0.0
    rng = np.random.default_rng(8)
    for _ in range(5):
        degrees = rng.uniform(1.0, 179.0)
        t = RigidTransform.from_axis_angle(rng.normal(size=3), degrees)
        assert np.degrees(t.rotation_angle()) == pytest.approx(degrees)
        assert t.compose(t.inverse()).rotation_angle() == pytest.approx(0.0, abs=1e-7)


def test_nearest_point_on_vertex_is_itself(sphere_mesh):
    vertex = sphere_mesh.vertices[17]
    result = nearest_surface_point(sphere_mesh, vertex)
    assert result.distance == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(result.point, vertex, atol=1e-12)


def test_nearest_point_above_square():
    result = nearest_surface_point(unit_square(), (0.5, 0.5, 2.0))
    assert result.distance == pytest.approx(2.0)
    np.testing.assert_allclose(result.point, [0.5, 0.5, 0.0], atol=1e-12)
    np.testing.assert_allclose(result.normal, [0.0, 0.0, 1.0])


def test_nearest_point_matches_brute_force(sphere_mesh):
    rng = np.random.default_rng(3)
    queries = rng.uniform(-1.2, 1.2, size=(100, 3))
    fast = sphere_mesh.closest_points(queries)
    slow = sphere_mesh.closest_points_brute_force(queries)
    np.testing.assert_allclose(fast.distances, slow.distances, rtol=0.0, atol=1e-12)
    np.testing.assert_allclose(fast.points, slow.points, atol=1e-9)


def test_nearest_distance_is_rigid_invariant(sphere_mesh):
    rng = np.random.default_rng(5)
    queries = rng.uniform(-1.0, 1.0, size=(20, 3))
    transform = random_transform(rng)
    moved = sphere_mesh.transformed(transform)
    before = sphere_mesh.closest_points(queries).distances
    after = moved.closest_points(transform.apply(queries)).distances
    np.testing.assert_allclose(before, after, atol=1e-9)


def test_nearest_point_on_empty_mesh_raises():
    with pytest.raises(GeometryError):
        nearest_surface_point(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), (0.0, 0.0, 0.0))


def test_ray_hits_square_head_on():
    hit = ray_intersect(unit_square(centered=True), (0.0, 0.0, 2.0), (0.0, 0.0, -1.0))
    assert hit is not None
    assert hit.t == pytest.approx(2.0)
    np.testing.assert_allclose(hit.point, [0.0, 0.0, 0.0], atol=1e-12)


def test_ray_parallel_to_plane_misses():
    assert ray_intersect(unit_square(), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0)) is None


def test_ray_against_sphere_matches_analytic_distance():
    sphere = icosphere(4, 0.8)
    hit = ray_intersect(sphere, (0.0, 0.0, 2.0), (0.0, 0.0, -1.0))
    # the faceted surface sits at most one sagitta inside the true sphere
    assert 1.2 <= hit.t <= 1.2 + 2e-3


def test_ray_hit_lies_on_triangle_plane(sphere_mesh):
    rng = np.random.default_rng(11)
    for _ in range(20):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        hit = ray_intersect(sphere_mesh, -2.0 * direction + rng.uniform(-0.1, 0.1, 3), direction)
        a = sphere_mesh.vertices[sphere_mesh.triangles[hit.triangle, 0]]
        assert abs((hit.point - a) @ sphere_mesh.face_normals[hit.triangle]) < 1e-9


def test_ray_direction_must_be_unit():
    with pytest.raises(GeometryError):
        ray_intersect(unit_square(), (0.0, 0.0, 1.0), (0.0, 0.0, -2.0))


def test_samples_stay_inside_single_triangle():
    mesh = TriangleMesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
    cloud = sample_surface(mesh, 3, seed=0)
    assert len(cloud) == 3
    x, y, z = cloud.points.T
    assert np.all(x >= 0.0) and np.all(y >= 0.0) and np.all(x + y <= 1.0 + 1e-12)
    np.testing.assert_allclose(z, 0.0)


def test_samples_follow_triangle_areas():
    # areas 4.5 and 0.5
    vertices = [[0, 0, 0], [3, 0, 0], [0, 3, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]]
    mesh = TriangleMesh(vertices, [[0, 1, 2], [3, 4, 5]])
    cloud = sample_surface(mesh, 10000, seed=42)
    assert 8700 <= np.count_nonzero(cloud.points[:, 0] < 4.0) <= 9300


def test_samples_are_deterministic_and_centered():
    sphere = icosphere(3, 0.8)
    first = sample_surface(sphere, 10000, seed=7)
    second = sample_surface(sphere, 10000, seed=7)
    assert np.array_equal(first.points, second.points)
    assert np.linalg.norm(first.points.mean(axis=0)) < 0.02


def test_sampling_errors():
    with pytest.raises(GeometryError):
        sample_surface(unit_square(), 0, seed=0)
    with pytest.raises(GeometryError):
        sample_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10, seed=0)


def test_degenerate_triangle_rejected():
    with pytest.raises(GeometryError, match="degenerate"):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_out_of_range_index_rejected():
    with pytest.raises(GeometryError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_bvh_covers_every_triangle(sphere_mesh):
    assert np.array_equal(sphere_mesh.bvh.covered_triangles(), np.arange(len(sphere_mesh)))


def test_rigid_transform_algebra():
    rng = np.random.default_rng(0)
    a, b = random_transform(rng), random_transform(rng)
    points = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(points), a.apply(b.apply(points)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(points)), points, atol=1e-12)
    assert RigidTransform.from_axis_angle((0, 0, 1), 30.0).rotation_angle() == pytest.approx(np.radians(30.0))
    again = RigidTransform.from_dict(a.to_dict())
    assert np.array_equal(again.rotation, a.rotation) and np.array_equal(again.translation, a.translation)


def test_rigid_transform_rejects_reflection():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        RigidTransform(2.0 * np.eye(3), np.zeros(3))


def test_point_cloud_normals_must_match_points():
    with pytest.raises(GeometryError):
        OrientedPointCloud(np.zeros((3, 3)), np.zeros((2, 3)))
