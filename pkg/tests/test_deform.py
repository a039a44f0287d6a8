import numpy as np
import pytest

from depthfusion.deform import (
    ContourConstraintSet,
    ContourView,
    contour_residual,
    contours_from_mapset,
    deform_to_contours,
    read_contours,
    silhouette_vertices,
    uniform_laplacian,
    write_contours,
)
from depthfusion.exceptions import ContourError, GeometryError
from depthfusion.geometry import RigidTransform, TriangleMesh
from depthfusion.schemas import DeformWeights
from depthfusion.shapes import grid_plane, icosphere
from depthfusion.views import icosahedron_rig


def tetrahedron():
    vertices = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]])
    return TriangleMesh(vertices, np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]))


def circle_contour(camera, radius, count=200):
    angles = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    x, y = radius * np.cos(angles), radius * np.sin(angles)
    return np.stack([x / camera.kappa + camera.width / 2 - 0.5, y / camera.kappa + camera.height / 2 - 0.5], axis=1)


def test_flat_grid_interior_has_zero_laplacian():
    n = 6
    plane = grid_plane(n)
    delta = uniform_laplacian(plane) @ plane.vertices
    ii, jj = np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="ij")
    interior = (ii * (n + 1) + jj).ravel()
    np.testing.assert_allclose(delta[interior], 0.0, atol=1e-12)
    assert np.abs(delta).max() > 0.01


def test_tetrahedron_laplacian_by_hand():
    expected = np.full((4, 4), -1.0 / 3.0)
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(uniform_laplacian(tetrahedron()).toarray(), expected, atol=1e-15)


def test_laplacian_coordinates_follow_rigid_motion():
    mesh = icosphere(2, 0.5)
    motion = RigidTransform.from_axis_angle((1.0, 2.0, 0.5), 37.0, (0.1, -0.2, 0.05))
    laplacian = uniform_laplacian(mesh)
    np.testing.assert_allclose(laplacian @ motion.apply(mesh.vertices),
                               (laplacian @ mesh.vertices) @ motion.rotation.T, atol=1e-12)


def test_isolated_vertex_rejected():
    mesh = tetrahedron()
    lonely = TriangleMesh(np.vstack([mesh.vertices, [[0.3, 0.3, 0.3]]]), mesh.triangles)
    with pytest.raises(GeometryError, match="isolated"):
        uniform_laplacian(lonely)


def test_contour_needs_eight_points():
    camera = icosahedron_rig(16, 16)[0]
    with pytest.raises(ContourError, match="need 8"):
        ContourView(0, camera, np.zeros((7, 2)))


def test_projected_silhouette_is_a_fixed_point():
    mesh = icosphere(3, 0.6)
    camera = icosahedron_rig(64, 64)[0]
    px, py, _ = camera.project(mesh.vertices[silhouette_vertices(mesh, camera)])
    constraints = ContourConstraintSet((ContourView(0, camera, np.stack([px, py], axis=1)),))
    assert contour_residual(mesh, constraints) == pytest.approx(0.0, abs=1e-9)
    deformed = deform_to_contours(mesh, constraints, DeformWeights(contour=5.0))
    assert np.abs(deformed.vertices - mesh.vertices).max() < 1e-6


def test_zero_contour_weight_leaves_mesh_alone():
    mesh = icosphere(2, 0.6)
    camera = icosahedron_rig(32, 32)[0]
    constraints = ContourConstraintSet((ContourView(0, camera, circle_contour(camera, 0.7)),))
    deformed = deform_to_contours(mesh, constraints, DeformWeights(contour=0.0))
    np.testing.assert_allclose(deformed.vertices, mesh.vertices, atol=1e-7)


def test_sphere_inflates_toward_larger_circle():
    mesh = icosphere(4, 0.6)
    camera = icosahedron_rig(64, 64)[0]
    constraints = ContourConstraintSet((ContourView(0, camera, circle_contour(camera, 0.66)),))
    before = contour_residual(mesh, constraints)
    deformed = deform_to_contours(mesh, constraints, DeformWeights(contour=10.0, iterations=2))
    after = contour_residual(deformed, constraints)
    assert after <= 0.5 * before
    assert np.array_equal(deformed.triangles, mesh.triangles)
    assert len(deformed.vertices) == len(mesh.vertices)
    assert deformed.vertex_normals is None


def test_default_weights_pull_sphere_toward_larger_circle():
    mesh = icosphere(4, 0.6)
    camera = icosahedron_rig(64, 64)[0]
    constraints = ContourConstraintSet((ContourView(0, camera, circle_contour(camera, 0.66)),))
    deformed = deform_to_contours(mesh, constraints, DeformWeights())
    assert contour_residual(deformed, constraints) <= 0.5 * contour_residual(mesh, constraints)


def test_mask_contours_sit_on_the_rendered_silhouette(sphere_mesh, sphere_maps):
    constraints = contours_from_mapset(sphere_maps)
    assert [c.view_index for c in constraints] == list(range(12))
    assert contour_residual(sphere_mesh, constraints) < 2.0


def test_contour_file_round_trip(tmp_path, sphere_maps):
    constraints = contours_from_mapset(sphere_maps, views=[1, 7])
    path = str(tmp_path / "contours.json")
    write_contours(path, constraints)
    loaded = read_contours(path, sphere_maps.rig)
    assert [c.view_index for c in loaded] == [1, 7]
    for a, b in zip(constraints, loaded):
        assert np.array_equal(a.points, b.points)
        assert b.camera is sphere_maps.rig[b.view_index]


def test_missing_or_malformed_contour_file(tmp_path, small_rig):
    with pytest.raises(ContourError, match="not found"):
        read_contours(str(tmp_path / "absent.json"), small_rig)
    (tmp_path / "bad.json").write_text('[{"points": []}]')
    with pytest.raises(ContourError, match="malformed"):
        read_contours(str(tmp_path / "bad.json"), small_rig)
