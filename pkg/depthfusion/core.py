import json
import os
import platform

import numpy as np
import pydantic
import scipy
from tqdm import tqdm

from . import __version__
from .config import PipelineConfig
from .exceptions import MeshIOError
from .fusion import FusionResult, solve_fusion
from .geometry import TriangleMesh
from .icp import align_rig, apply_view_transforms, transforms_to_json
from .logging_conf import logger
from .maps_io import MapSet, write_mapset
from .mesh_io import read_shape, write_ply
from .metrics import chamfer, depth_map_error, evaluate, normal_map_error
from .pointgen import generate_points, naive_point_cloud
from .renderer import perturb_mapset, render_mapset
from .shapes import SHAPES, normalize_to_unit_sphere
from .views import icosahedron_rig


def versions() -> dict:
    return {
        "depthfusion": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
    }


def load_mesh(path=None, shape=None, normalize: bool = False) -> TriangleMesh:
    if shape is not None:
        return SHAPES[shape]()
    mesh = read_shape(path)
    if not isinstance(mesh, TriangleMesh):
        raise MeshIOError(f"{path}: expected a triangle mesh (.obj)")
    if normalize:
        mesh = normalize_to_unit_sphere(mesh)
        logger.info("Mesh normalized into the view sphere", extra={"path": str(path)})
    return mesh


def write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


class FusionPipeline:
    """Render, corrupt, align, fuse and score one shape, writing every stage under `output_dir`."""

    def __init__(self, config: PipelineConfig, output_dir):
        self.config = config
        self.output_dir = output_dir

    def _path(self, *parts):
        return os.path.join(self.output_dir, *parts)

    def render(self, mesh: TriangleMesh, smooth_normals: bool = False) -> MapSet:
        rig = icosahedron_rig(self.config.rig.width, self.config.rig.height, self.config.rig.up_axis)
        return render_mapset(mesh, rig, smooth_normals=smooth_normals, threads=self.config.threads)

    def perturb(self, mapset: MapSet) -> MapSet:
        return perturb_mapset(mapset, self.config.perturbation())

    def align(self, mapset: MapSet):
        params = self.config.icp.resolved(mapset.rig.kappa)
        sets = generate_points(mapset)
        transforms = align_rig(sets, params, self.config.icp_sweeps, workers=self.config.threads)
        return apply_view_transforms(mapset, transforms), transforms

    def fuse(self, mapset: MapSet) -> FusionResult:
        return solve_fusion(mapset, self.config.fusion, threads=self.config.threads)

    def run(self, mesh: TriangleMesh) -> dict:
        os.makedirs(self.output_dir, exist_ok=True)
        logger.info("Pipeline started", extra={"seed": self.config.seed, "versions": versions(),
                                               "config": self.config.model_dump(mode="json")})
        with tqdm(total=4, desc="Overall progress", disable=None) as pbar:
            truth = self.render(mesh)
            write_mapset(self._path("truth"), truth)
            pbar.update(1)

            observed = self.perturb(truth)
            write_mapset(self._path("observed"), observed)
            pbar.update(1)

            aligned, transforms = self.align(observed)
            with open(self._path("transforms.json"), "w") as f:
                f.write(transforms_to_json(transforms))
            naive = naive_point_cloud(generate_points(aligned))
            write_ply(self._path("naive.ply"), naive)
            pbar.update(1)

            fused_maps, fused_cloud, report = self.fuse(aligned)
            write_mapset(self._path("maps"), fused_maps)
            write_ply(self._path("fused.ply"), fused_cloud)
            with open(self._path("report.json"), "w") as f:
                f.write(report.to_json())
            pbar.update(1)

        params = self.config.metrics
        seed = self.config.seed
        summary = {
            "seed": seed,
            "config": self.config.model_dump(mode="json"),
            "naive": evaluate(naive, mesh, params, seed),
            "fused": evaluate(fused_cloud, mesh, params, seed),
            "surface_distance": {
                "naive": chamfer(naive, mesh, params.samples, seed, directional=True),
                "fused": chamfer(fused_cloud, mesh, params.samples, seed, directional=True),
            },
            "depth_map_error": {
                "observed": depth_map_error(observed, truth),
                "fused": depth_map_error(fused_maps, truth),
            },
            "normal_map_error_deg": {
                "observed": normal_map_error(observed, truth),
                "fused": normal_map_error(fused_maps, truth),
            },
            "icp_max_angle_deg": max(float(np.degrees(t.rotation_angle())) for t in transforms),
            "fusion": {
                "unknowns": report.unknowns,
                "outliers_removed": report.outliers_removed,
                "iterations": len(report.iterations),
                "final_energy": report.final_energy,
                "converged": report.converged,
            },
        }
        write_json(self._path("summary.json"), summary)
        logger.info("Pipeline finished", extra={"output": self.output_dir})
        return summary
