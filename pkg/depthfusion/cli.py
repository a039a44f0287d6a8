import argparse
import json
import os
import sys

from tabulate import tabulate

from .config import load_config, parse_perturbation
from .core import FusionPipeline, load_mesh, versions, write_json
from .deform import contour_residual, contours_from_mapset, deform_to_contours, read_contours
from .exceptions import (
    ConfigError,
    ContourError,
    FusionError,
    GeometryError,
    IcpError,
    MapSetError,
    MeshIOError,
    MetricsError,
    RigError,
    ValidationError,
)
from .icp import transforms_to_json
from .logging_conf import configure_logging, logger
from .maps_io import read_mapset, write_mapset
from .mesh_io import read_shape, write_obj, write_ply
from .metrics import evaluate
from .pointgen import generate_points, naive_point_cloud
from .schemas import DeformWeights, FusionConfig, IcpParams, MetricParams
from .shapes import SHAPES

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

DATA_ERRORS = (MapSetError, MeshIOError, ValidationError, GeometryError, ContourError, MetricsError, RigError, OSError)
NUMERICAL_ERRORS = (FusionError, IcpError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default(model, field):
    return model.model_fields[field].default


def _add_common(parser):
    parser.add_argument("--config", help="TOML config file; flags override it")
    parser.add_argument("--seed", type=int, help="seed for every stochastic step (default: 0)")
    parser.add_argument("--threads", type=int, help="worker threads (default: 1)")
    parser.add_argument("--log-json", action="store_true", help="one JSON object per log line")
    parser.add_argument("--log-file", help="also write the log here")
    parser.add_argument("--out", required=True, help="output directory")


def _add_shape_source(parser):
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--mesh", help="OBJ mesh inside the unit sphere")
    source.add_argument("--shape", choices=sorted(SHAPES), help="built-in test shape")
    parser.add_argument("--normalize", action="store_true", help="centre and scale --mesh into the view sphere")
    parser.add_argument("--width", type=int, help="image width (default: 256)")
    parser.add_argument("--height", type=int, help="image height (default: 256)")


def _add_fusion_flags(parser):
    for name in ("w1", "w2", "w3", "w4"):
        parser.add_argument(f"--{name}", type=float,
                            help=f"{FusionConfig.model_fields[name].description} weight "
                                 f"(default: {_default(FusionConfig, name)})")
    parser.add_argument("--iterations", type=int,
                        help=f"outer iterations (default: {_default(FusionConfig, 'outer_iterations')})")
    parser.add_argument("--occlusion-threshold", type=float, help="occlusion depth slack (default: 4*kappa)")
    parser.add_argument("--depth-only", action="store_true", help="ignore predicted normals (w2 = w4 = 0)")


def _add_perturb_flag(parser):
    parser.add_argument("--perturb", help="comma-separated key=value: offset, bias, noise, normal_noise, "
                                          "jitter_deg, jitter_t, views (e.g. bias=0.02,noise=0.005)")


def build_parser():
    parser = _Parser(prog="depthfusion", description="Fuse multi-view depth and normal maps into one point cloud")
    sub = parser.add_subparsers(dest="command", required=True)

    render = sub.add_parser("render", help="render ground-truth maps of a mesh through the 12-view rig")
    _add_common(render)
    _add_shape_source(render)
    render.add_argument("--smooth-normals", action="store_true", help="interpolate vertex normals")

    perturb = sub.add_parser("perturb", help="corrupt a map set with seeded noise, bias and pose jitter")
    _add_common(perturb)
    perturb.add_argument("--in", dest="input", required=True, help="map set directory")
    _add_perturb_flag(perturb)

    icp = sub.add_parser("icp", help="rigidly align the views of a map set")
    _add_common(icp)
    icp.add_argument("--in", dest="input", required=True, help="map set directory")
    icp.add_argument("--icp-iterations", type=int,
                     help=f"ICP iterations per rejection level (default: {_default(IcpParams, 'max_iterations')})")
    icp.add_argument("--rejection-distance", type=float, help="correspondence cut-off (default: 4*kappa)")
    icp.add_argument("--sweeps", type=int, help="round-robin sweeps (default: 3)")

    fuse = sub.add_parser("fuse", help="jointly optimize depths of all views")
    _add_common(fuse)
    fuse.add_argument("--in", dest="input", required=True, help="map set directory")
    _add_fusion_flags(fuse)

    deform = sub.add_parser("deform", help="fit a mesh's silhouettes to the map set's contours")
    _add_common(deform)
    deform.add_argument("--mesh", required=True, help="OBJ mesh to deform")
    deform.add_argument("--in", dest="input", required=True, help="map set directory (rig and masks)")
    deform.add_argument("--contours", help="contour JSON; default: external contours of the masks")
    deform.add_argument("--w-lap", type=float,
                        help=f"Laplacian weight (default: {_default(DeformWeights, 'laplacian')})")
    deform.add_argument("--w-con", type=float,
                        help=f"contour weight (default: {_default(DeformWeights, 'contour')})")
    deform.add_argument("--deform-iterations", type=int,
                        help=f"re-correspondence passes (default: {_default(DeformWeights, 'iterations')})")

    metrics = sub.add_parser("metrics", help="compare a reconstruction with a reference shape")
    _add_common(metrics)
    metrics.add_argument("--recon", required=True, help="reconstruction (.ply cloud or .obj mesh)")
    metrics.add_argument("--ref", required=True, help="reference (.obj mesh or .ply cloud)")
    metrics.add_argument("--recon-maps", help="map set of the reconstruction, for map errors")
    metrics.add_argument("--ref-maps", help="map set of the reference, for map errors")
    metrics.add_argument("--samples", type=int,
                         help=f"surface samples per shape (default: {_default(MetricParams, 'samples')})")
    metrics.add_argument("--voxel-resolution", type=int,
                         help=f"voxels per axis (default: {_default(MetricParams, 'voxel_resolution')})")
    metrics.add_argument("--voxel-mode", choices=["solid", "surface"], help="voxelization mode (default: solid)")
    metrics.add_argument("--directional", action="store_true", help="one-way chamfer, recon to ref")

    pipeline = sub.add_parser("pipeline", help="render, perturb, align, fuse and score in one go")
    _add_common(pipeline)
    _add_shape_source(pipeline)
    _add_perturb_flag(pipeline)
    _add_fusion_flags(pipeline)
    return parser


def _overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    rig = {k: getattr(args, k, None) for k in ("width", "height")}
    if any(v is not None for v in rig.values()):
        overrides["rig"] = {k: v for k, v in rig.items() if v is not None}
    if getattr(args, "perturb", None):
        overrides["perturb"] = parse_perturbation(args.perturb)
    fusion = {name: getattr(args, name, None) for name in ("w1", "w2", "w3", "w4")}
    fusion["outer_iterations"] = getattr(args, "iterations", None)
    fusion["occlusion_threshold"] = getattr(args, "occlusion_threshold", None)
    fusion = {k: v for k, v in fusion.items() if v is not None}
    if fusion:
        overrides["fusion"] = fusion
    icp = {"max_iterations": getattr(args, "icp_iterations", None),
           "rejection_distance": getattr(args, "rejection_distance", None)}
    icp = {k: v for k, v in icp.items() if v is not None}
    if icp:
        overrides["icp"] = icp
    if getattr(args, "sweeps", None) is not None:
        overrides["icp_sweeps"] = args.sweeps
    metrics = {"samples": getattr(args, "samples", None), "voxel_resolution": getattr(args, "voxel_resolution", None),
               "voxel_mode": getattr(args, "voxel_mode", None),
               "directional_chamfer": True if getattr(args, "directional", False) else None}
    metrics = {k: v for k, v in metrics.items() if v is not None}
    if metrics:
        overrides["metrics"] = metrics
    deform = {"laplacian": getattr(args, "w_lap", None), "contour": getattr(args, "w_con", None),
              "iterations": getattr(args, "deform_iterations", None)}
    deform = {k: v for k, v in deform.items() if v is not None}
    if deform:
        overrides["deform"] = deform
    return overrides


def _print_table(title, record):
    rows = [[key, "-" if value is None else (f"{value:.6g}" if isinstance(value, float) else value)]
            for key, value in record.items()]
    print(f"\n{title}:")
    print(tabulate(rows, headers=["Measure", "Value"], tablefmt="grid"))


def _run_render(args, config):
    mesh = load_mesh(args.mesh, args.shape, normalize=args.normalize)
    write_mapset(args.out, FusionPipeline(config, args.out).render(mesh, smooth_normals=args.smooth_normals))


def _run_perturb(args, config):
    mapset = read_mapset(args.input, threads=config.threads)
    write_mapset(args.out, FusionPipeline(config, args.out).perturb(mapset))


def _run_icp(args, config):
    mapset = read_mapset(args.input, threads=config.threads)
    aligned, transforms = FusionPipeline(config, args.out).align(mapset)
    write_mapset(args.out, aligned)
    with open(os.path.join(args.out, "transforms.json"), "w") as f:
        f.write(transforms_to_json(transforms))


def _run_fuse(args, config):
    mapset = read_mapset(args.input, threads=config.threads)
    fused, cloud, report = FusionPipeline(config, args.out).fuse(mapset)
    write_mapset(os.path.join(args.out, "maps"), fused)
    write_ply(os.path.join(args.out, "fused.ply"), cloud)
    write_ply(os.path.join(args.out, "naive.ply"), naive_point_cloud(generate_points(mapset)))
    with open(os.path.join(args.out, "report.json"), "w") as f:
        f.write(report.to_json())
    rows = [[r.iteration, f"{r.e_net:.6g}", f"{r.e_orth:.6g}", f"{r.e_cons:.6g}", f"{r.total:.6g}",
             r.correspondences, r.cg_iterations] for r in report.iterations]
    print(tabulate(rows, headers=["Iter", "E_net", "E_orth", "E_cons", "Total", "Corr", "CG"], tablefmt="grid"))


def _run_deform(args, config):
    mesh = load_mesh(args.mesh)
    mapset = read_mapset(args.input, threads=config.threads)
    constraints = read_contours(args.contours, mapset.rig) if args.contours else contours_from_mapset(mapset)
    before = contour_residual(mesh, constraints)
    deformed = deform_to_contours(mesh, constraints, config.deform)
    after = contour_residual(deformed, constraints)
    os.makedirs(args.out, exist_ok=True)
    write_obj(os.path.join(args.out, "deformed.obj"), deformed)
    _print_table("Contour residual (pixels)", {"before": before, "after": after})


def _run_metrics(args, config):
    recon = read_shape(args.recon)
    ref = read_shape(args.ref)
    recon_maps = read_mapset(args.recon_maps) if args.recon_maps else None
    ref_maps = read_mapset(args.ref_maps) if args.ref_maps else None
    record = evaluate(recon, ref, config.metrics, config.seed, recon_maps, ref_maps)
    payload = dict(record, parameters=dict(config.metrics.model_dump(), seed=config.seed))
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "metrics.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    _print_table("Metrics", record)


def _run_pipeline(args, config):
    mesh = load_mesh(args.mesh, args.shape, normalize=args.normalize)
    summary = FusionPipeline(config, args.out).run(mesh)
    _print_table("Naive concatenation", summary["naive"])
    _print_table("Fused", summary["fused"])


COMMANDS = {
    "render": _run_render,
    "perturb": _run_perturb,
    "icp": _run_icp,
    "fuse": _run_fuse,
    "deform": _run_deform,
    "metrics": _run_metrics,
    "pipeline": _run_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(json_lines=args.log_json, log_file=args.log_file)
    try:
        config = load_config(args.config, **_overrides(args))
        if getattr(args, "depth_only", False):
            config = config.model_copy(update={"fusion": config.fusion.depth_only()})
        logger.info("depthfusion run", extra={"command": args.command, "seed": config.seed,
                                              "versions": versions(), "config": config.model_dump(mode="json")})
        COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except NUMERICAL_ERRORS as e:
        logger.error(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    except DATA_ERRORS as e:
        logger.error(str(e))
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
