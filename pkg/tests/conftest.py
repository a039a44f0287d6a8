import logging

import numpy as np
import pytest

from depthfusion.geometry import RigidTransform
from depthfusion.logging_conf import logger
from depthfusion.maps_io import MapSet, ViewMaps
from depthfusion.renderer import render_mapset
from depthfusion.shapes import box, icosphere, torus
from depthfusion.views import OrthographicCamera, ViewRig, icosahedron_rig


@pytest.fixture(autouse=True)
def reset_logger():
    yield
    # the CLI reconfigures the package logger; put it back for the next test
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)
    logger.propagate = True


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(3, 0.8)


@pytest.fixture(scope="session")
def box_mesh():
    return box((0.6, 0.6, 0.6))


@pytest.fixture(scope="session")
def torus_mesh():
    return torus(0.6, 0.2, 32, 16)


@pytest.fixture(scope="session")
def small_rig():
    return icosahedron_rig(48, 48)


@pytest.fixture(scope="session")
def sphere_maps(sphere_mesh, small_rig):
    return render_mapset(sphere_mesh, small_rig)


@pytest.fixture(scope="session")
def box_maps(box_mesh):
    return render_mapset(box_mesh, icosahedron_rig(64, 64))


@pytest.fixture(scope="session")
def torus_maps(torus_mesh, small_rig):
    return render_mapset(torus_mesh, small_rig)


def identity_camera(size=8, kappa=None):
    return OrthographicCamera(RigidTransform.identity(), kappa or 2.0 / size, size, size)


def flat_mapset(rig, masks, depth=0.25):
    """Map set with a constant depth and camera-facing normals on the given masks."""
    views = []
    for mask in masks:
        mask = np.asarray(mask, dtype=bool)
        normal = np.zeros(mask.shape + (3,))
        normal[..., 2] = 1.0
        views.append(ViewMaps(np.full(mask.shape, depth), normal, mask))
    return MapSet(rig, tuple(views))


def block_mask(size, lo, hi):
    mask = np.zeros((size, size), dtype=bool)
    mask[lo:hi, lo:hi] = True
    return mask


def single_view_rig(size=8):
    return ViewRig((identity_camera(size),))


@pytest.fixture(scope="session")
def tilted_box_maps(box_mesh):
    """Box turned off the rig's symmetry axes, so every view pins down a rigid motion."""
    turned = box_mesh.transformed(RigidTransform.from_axis_angle((1.0, 2.0, 3.0), 25.0))
    return render_mapset(turned, icosahedron_rig(64, 64))
