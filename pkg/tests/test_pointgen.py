import numpy as np

from conftest import flat_mapset, identity_camera
from depthfusion.maps_io import MapSet, ViewMaps
from depthfusion.pointgen import generate_points, naive_point_cloud, silhouette_pixels
from depthfusion.views import ViewRig, icosahedron_rig


def test_empty_masks_give_empty_sets():
    rig = icosahedron_rig(8, 8)
    sets = generate_points(MapSet(rig, tuple(ViewMaps.empty(8, 8) for _ in rig)))
    assert len(sets) == 12
    assert all(s.is_empty for s in sets)
    assert len(naive_point_cloud(sets)) == 0


def test_one_point_per_foreground_pixel(sphere_maps):
    sets = generate_points(sphere_maps)
    for s, maps in zip(sets, sphere_maps):
        assert len(s) == maps.foreground_count
        np.testing.assert_allclose(np.linalg.norm(s.normals, axis=1), 1.0, atol=1e-6)
    assert len(naive_point_cloud(sets)) == sphere_maps.foreground_count


def test_sphere_points_near_analytic_surface(sphere_maps):
    kappa = sphere_maps.rig.kappa
    for s in generate_points(sphere_maps):
        radii = np.linalg.norm(s.positions, axis=1)
        # facets sit inside the analytic sphere by less than a pixel at this size
        assert np.all(np.abs(radii - 0.8) <= kappa)


def test_single_pixel_follows_unproject_formula():
    rig = ViewRig((identity_camera(256),))
    mask = np.zeros((256, 256), dtype=bool)
    mask[127, 127] = True
    (points,) = generate_points(flat_mapset(rig, [mask], depth=0.5))
    kappa = 2.0 / 256
    np.testing.assert_allclose(points.positions, [[-kappa / 2, -kappa / 2, 0.5]], atol=1e-15)
    assert points.pixels.tolist() == [[127, 127]]
    assert points.silhouette.tolist() == [True]


def test_normals_rotate_into_object_space(sphere_maps):
    s = generate_points(sphere_maps)[3]
    outward = s.positions / np.linalg.norm(s.positions, axis=1, keepdims=True)
    assert np.all(np.einsum("ij,ij->i", s.normals, outward) > 0.9)


def test_full_image_silhouette_is_the_border():
    silhouette = silhouette_pixels(np.ones((6, 7), dtype=bool))
    expected = np.ones((6, 7), dtype=bool)
    expected[1:-1, 1:-1] = False
    assert np.array_equal(silhouette, expected)


def test_block_silhouette_is_its_ring():
    mask = np.zeros((9, 9), dtype=bool)
    mask[3:6, 3:6] = True
    silhouette = silhouette_pixels(mask)
    assert silhouette.sum() == 8
    assert not silhouette[4, 4]


def test_rendered_silhouette_hugs_disk_edge(sphere_maps):
    maps = sphere_maps[0]
    sets = generate_points(sphere_maps)[0]
    kappa = sphere_maps.rig.kappa
    x, y = sphere_maps.rig[0].pixel_to_camera(sets.pixels[:, 0], sets.pixels[:, 1])
    radius = np.hypot(x, y)[sets.silhouette]
    assert sets.silhouette.sum() == silhouette_pixels(maps.mask).sum()
    assert np.all(radius >= 0.8 - 3.0 * kappa)
