import os

import numpy as np
import pytest

from conftest import block_mask, flat_mapset
from depthfusion.exceptions import MapDimensionError, MapHeaderError, MissingMapFileError, ValidationError
from depthfusion.maps_io import (
    ViewMaps,
    read_mapset,
    read_pfm,
    read_pgm,
    threshold_foreground,
    validate_mapset,
    write_mapset,
    write_pfm,
    write_pgm,
)
from depthfusion.views import icosahedron_rig


def small_mapset(depth=0.25):
    rig = icosahedron_rig(8, 8)
    return flat_mapset(rig, [block_mask(8, 2, 6)] * len(rig), depth)


def with_view(mapset, v, **maps):
    views = list(mapset.views)
    current = views[v]
    views[v] = ViewMaps(maps.get("depth", current.depth), maps.get("normal", current.normal),
                        maps.get("mask", current.mask))
    return mapset.with_views(views)


def test_rendered_mapset_round_trips_bitwise(tmp_path, sphere_maps):
    write_mapset(tmp_path, sphere_maps)
    loaded = read_mapset(tmp_path)
    assert loaded.equals(sphere_maps)
    write_mapset(tmp_path / "again", loaded)
    for name in sorted(os.listdir(tmp_path / "again")):
        assert (tmp_path / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_rendered_mapset_is_valid(sphere_maps):
    assert validate_mapset(sphere_maps) == []


def test_missing_mask_names_view(tmp_path):
    write_mapset(tmp_path, small_mapset())
    os.remove(tmp_path / "mask_3.pgm")
    with pytest.raises(MissingMapFileError, match="view 3") as error:
        read_mapset(tmp_path)
    assert error.value.view == 3
    assert error.value.path.endswith("mask_3.pgm")


def test_missing_rig_manifest(tmp_path):
    with pytest.raises(MissingMapFileError, match="rig.json"):
        read_mapset(tmp_path)


def test_nan_depth_pinpoints_pixel(tmp_path):
    mapset = small_mapset()
    depth = mapset[4].depth.copy()
    depth[3, 2] = np.nan
    write_mapset(tmp_path, with_view(mapset, 4, depth=depth))
    with pytest.raises(ValidationError) as error:
        read_mapset(tmp_path)
    (violation,) = error.value.violations
    assert (violation.view, violation.pixel, violation.rule) == (4, (2, 3), "depth not finite")


def test_short_normal_is_one_violation():
    mapset = small_mapset()
    normal = mapset[0].normal.copy()
    normal[4, 4] = (0.0, 0.0, 0.5)
    violations = validate_mapset(with_view(mapset, 0, normal=normal))
    assert [(v.view, v.pixel, v.rule) for v in violations] == [(0, (4, 4), "normal not unit length")]


def test_depth_out_of_range_is_one_violation():
    mapset = small_mapset()
    depth = mapset[2].depth.copy()
    depth[5, 3] = 1.2
    violations = validate_mapset(with_view(mapset, 2, depth=depth))
    assert [(v.view, v.pixel, v.rule) for v in violations] == [(2, (3, 5), "depth outside [-1, 1]")]


def test_background_values_are_not_range_checked():
    mapset = small_mapset()
    depth = mapset[1].depth.copy()
    depth[0, 0] = 5.0
    assert validate_mapset(with_view(mapset, 1, depth=depth)) == []


def test_wrong_dimensions_rejected(tmp_path):
    write_mapset(tmp_path, small_mapset())
    write_pfm(tmp_path / "depth_6.pfm", np.zeros((8, 9), dtype=np.float32))
    with pytest.raises(MapDimensionError, match="view 6"):
        read_mapset(tmp_path)


def test_malformed_header_names_view(tmp_path):
    write_mapset(tmp_path, small_mapset())
    (tmp_path / "normal_5.pfm").write_bytes(b"PX\n8 8\n-1.0\n")
    with pytest.raises(MapHeaderError, match="view 5") as error:
        read_mapset(tmp_path)
    assert error.value.view == 5


def test_probability_map_stands_in_for_mask(tmp_path):
    mapset = small_mapset()
    write_mapset(tmp_path, mapset)
    os.remove(tmp_path / "mask_0.pgm")
    probability = np.where(mapset[0].mask, 0.9, 0.1).astype(np.float32)
    probability[0, 0] = 0.5
    write_pfm(tmp_path / "prob_0.pfm", probability)
    loaded = read_mapset(tmp_path)
    assert np.array_equal(loaded[0].mask, mapset[0].mask)


def test_wrong_probability_dimensions_name_the_probability_file(tmp_path):
    write_mapset(tmp_path, small_mapset())
    os.remove(tmp_path / "mask_3.pgm")
    write_pfm(tmp_path / "prob_3.pfm", np.full((9, 8), 0.9, dtype=np.float32))
    with pytest.raises(MapDimensionError, match="prob_3.pfm") as error:
        read_mapset(tmp_path)
    assert "mask_3" not in str(error.value)
    assert error.value.path.endswith("prob_3.pfm")


def test_threshold_is_strict():
    assert threshold_foreground(np.array([0.49, 0.5, 0.51])).tolist() == [False, False, True]


def test_pgm_rows_are_stored_top_down(tmp_path):
    mask = np.zeros((3, 4), dtype=bool)
    mask[0, 1] = True  # lowest row in camera y
    write_pgm(tmp_path / "m.pgm", mask)
    data = (tmp_path / "m.pgm").read_bytes()
    pixels = np.frombuffer(data[-12:], dtype=np.uint8).reshape(3, 4)
    assert pixels[2, 1] == 255 and pixels.sum() == 255
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), mask)


def test_pfm_header_and_rows(tmp_path):
    image = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "d.pfm", image)
    data = (tmp_path / "d.pfm").read_bytes()
    assert data.startswith(b"Pf\n3 2\n-1.0\n")
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), image)


def test_big_endian_pfm_is_read(tmp_path):
    image = np.array([[1.5, -2.0]], dtype=np.float32)
    (tmp_path / "be.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + image.astype(">f4").tobytes())
    assert np.array_equal(read_pfm(tmp_path / "be.pfm"), image)


def test_view_maps_replace_resets_background():
    maps = small_mapset()[0]
    mask = maps.mask.copy()
    mask[2, 2] = False
    replaced = maps.replace(mask=mask)
    assert replaced.depth[2, 2] == 0.0
    assert replaced.normal[2, 2].tolist() == [0.0, 0.0, 1.0]
    assert replaced.foreground_count == maps.foreground_count - 1
