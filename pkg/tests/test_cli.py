import json
import os

import pytest

from depthfusion.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from depthfusion.maps_io import read_mapset
from depthfusion.mesh_io import write_obj
from depthfusion.shapes import box


def test_help_lists_fusion_defaults(capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    with pytest.raises(SystemExit) as exit_info:
        main(["fuse", "--help"])
    assert exit_info.value.code == 0
    text = capsys.readouterr().out
    assert "(default: 1.0)" in text and "(default: 0.3)" in text
    assert "outer iterations (default: 5)" in text


def test_unknown_command_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["melt", "--out", "x"])
    assert exit_info.value.code == EXIT_USAGE
    assert "invalid choice" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["render", "--shape", "box", "--config", str(tmp_path / "none.toml"),
                 "--out", str(tmp_path / "out")]) == EXIT_USAGE


def test_bad_perturbation_is_a_usage_error(tmp_path):
    assert main(["pipeline", "--shape", "box", "--perturb", "wobble=1", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_metrics_input_names_the_file(tmp_path, capsys):
    missing = str(tmp_path / "recon.ply")
    code = main(["metrics", "--recon", missing, "--ref", missing, "--out", str(tmp_path / "m")])
    assert code == EXIT_DATA
    assert "recon.ply" in capsys.readouterr().err


def test_fuse_without_map_set(tmp_path):
    assert main(["fuse", "--in", str(tmp_path), "--out", str(tmp_path / "fused")]) == EXIT_DATA


def test_normalize_flag_fits_large_mesh(tmp_path):
    mesh = str(tmp_path / "big.obj")
    write_obj(mesh, box((3.0, 2.0, 1.0), center=(4.0, 0.0, 0.0)))
    args = ["render", "--mesh", mesh, "--width", "8", "--height", "8"]
    assert main(args + ["--out", str(tmp_path / "raw")]) != EXIT_OK
    assert main(args + ["--normalize", "--out", str(tmp_path / "fit")]) == EXIT_OK
    assert read_mapset(str(tmp_path / "fit")).foreground_count > 0


def test_render_then_fuse(tmp_path):
    maps = str(tmp_path / "maps")
    assert main(["render", "--shape", "sphere", "--width", "16", "--height", "16", "--out", maps]) == EXIT_OK
    assert len(read_mapset(maps)) == 12
    out = tmp_path / "fused"
    assert main(["fuse", "--in", maps, "--out", str(out), "--iterations", "2"]) == EXIT_OK
    for name in ("fused.ply", "naive.ply", "report.json", os.path.join("maps", "rig.json")):
        assert (out / name).exists()
    report = json.loads((out / "report.json").read_text())
    assert 1 <= len(report["iterations"]) <= 2


def test_metrics_writes_record(tmp_path):
    maps = str(tmp_path / "maps")
    main(["render", "--shape", "box", "--width", "16", "--height", "16", "--out", maps])
    main(["fuse", "--in", maps, "--out", str(tmp_path / "fused"), "--iterations", "1"])
    write_obj(str(tmp_path / "box.obj"), box())
    code = main(["metrics", "--recon", str(tmp_path / "fused" / "fused.ply"), "--ref", str(tmp_path / "box.obj"),
                 "--samples", "500", "--out", str(tmp_path / "scores")])
    assert code == EXIT_OK
    record = json.loads((tmp_path / "scores" / "metrics.json").read_text())
    assert record["chamfer"] < 0.1
    assert record["volumetric_jaccard"] is None
    assert record["parameters"]["samples"] == 500


def pipeline_outputs(out, threads):
    args = ["pipeline", "--shape", "box", "--width", "16", "--height", "16", "--perturb", "bias=0.02,noise=0.005",
            "--iterations", "2", "--seed", "3", "--threads", str(threads), "--out", str(out)]
    assert main(args) == EXIT_OK
    return out


def test_pipeline_is_deterministic(tmp_path):
    first = pipeline_outputs(tmp_path / "a", 1)
    second = pipeline_outputs(tmp_path / "b", 1)
    threaded = pipeline_outputs(tmp_path / "c", 2)
    assert (first / "summary.json").read_bytes() == (second / "summary.json").read_bytes()
    for name in ("fused.ply", "naive.ply", "transforms.json", os.path.join("maps", "depth_4.pfm")):
        assert (first / name).read_bytes() == (threaded / name).read_bytes()
    summary = json.loads((first / "summary.json").read_text())
    assert summary["seed"] == 3
    assert set(summary["fused"]) >= {"chamfer", "hausdorff", "normal_distance_deg"}
