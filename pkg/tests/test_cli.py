import json
import os
import subprocess
import sys

import pytest

from fixtures import make_planar, synthetic_transect, tree_bytes
from trapmetric import io
from trapmetric.cli import main
from trapmetric.estimation import BoundingBox, DistanceEstimate
from trapmetric.pipeline import RunConfig, build_config, parse_config_text


def run(*argv):
    return main([str(a) for a in argv])


def test_calibrate_many_transects(tmp_path):
    root, out = tmp_path / "in", tmp_path / "out"
    for i in range(24):
        synthetic_transect(root, f"T{i + 1:02d}", n_obs=0, seed=i)
    assert run("calibrate", "--input", root, "--output", out, "--jobs", 4) == 0
    report = io.load_report(out / "calibration_report.json")
    assert len(report["transects"]) == 24 and report["skipped"] == []
    t = report["transects"]["T07"]
    assert t["metric_fit"]["m"] == pytest.approx(1.0, abs=1e-6)
    assert (out / "calibration" / "T07" / "target_calibrated.pfm").is_file()


def test_calibrate_planar_transect_is_skipped(tmp_path):
    root, out = tmp_path / "in", tmp_path / "out"
    synthetic_transect(root, "T01", n_obs=0)
    make_planar(root, "T02")
    assert run("calibrate", "--input", root, "--output", out) == 2
    report = io.load_report(out / "calibration_report.json")
    assert list(report["transects"]) == ["T01"]
    (skip,) = report["skipped"]
    assert skip["transect_id"] == "T02" and skip["planar_warning"] is True
    assert not (out / "calibration" / "T02").exists()


def test_calibrate_empty_root(tmp_path):
    (tmp_path / "in").mkdir()
    assert run("calibrate", "--input", tmp_path / "in", "--output", tmp_path / "out") == 0
    assert io.load_report(tmp_path / "out" / "calibration_report.json") == {"skipped": [], "transects": {}}


def test_estimate_one_row_per_animal(tmp_path):
    root, out = tmp_path / "in", tmp_path / "out"
    synthetic_transect(root, "T01", n_obs=10, seed=3)
    assert run("calibrate", "--input", root, "--output", out) == 0
    assert run("estimate", "--input", root, "--output", out) == 0
    ests = io.load_estimates_csv(out / "estimates.csv")
    assert len(ests) == 10
    gt = {g.key: g.distance_m for g in io.load_groundtruth_csv(root / "T01" / "groundtruth.csv")}
    for e in ests:
        assert e.distance_m == pytest.approx(gt[e.key], abs=1e-3)


def test_estimate_zero_detections(tmp_path):
    root, out = tmp_path / "in", tmp_path / "out"
    tdir = synthetic_transect(root, "T01", n_obs=2)
    io.write_detections(tdir / "detections" / "obs_0001.json", io.detections_from_dict({"image_id": "obs_0001", "boxes": []}))
    run("calibrate", "--input", root, "--output", out)
    assert run("estimate", "--input", root, "--output", out) == 0
    assert [e.image_id for e in io.load_estimates_csv(out / "estimates.csv")] == ["obs_0000"]
    rec = io.load_report(out / "estimation_report.json")["observations"]
    assert [(r["image_id"], r["detections"], r["estimates"]) for r in rec] == [("obs_0000", 1, 1), ("obs_0001", 0, 0)]


def test_estimate_without_calibration(tmp_path):
    root, out = tmp_path / "in", tmp_path / "out"
    synthetic_transect(root, "T01", n_obs=1)
    assert run("estimate", "--input", root, "--output", out) == 2
    (err,) = io.load_report(out / "estimation_report.json")["errors"]
    assert err["error"] == "CalibrationMissing" and err["transect_id"] == "T01"


def test_estimate_isolates_bad_observation(tmp_path):
    root, out = tmp_path / "in", tmp_path / "out"
    tdir = synthetic_transect(root, "T01", n_obs=3)
    run("calibrate", "--input", root, "--output", out)
    (tdir / "observations" / "obs_0001.pfm").write_bytes(b"Pf\n1 1\n")
    assert run("estimate", "--input", root, "--output", out) == 2
    assert [e.image_id for e in io.load_estimates_csv(out / "estimates.csv")] == ["obs_0000", "obs_0002"]
    (err,) = io.load_report(out / "estimation_report.json")["errors"]
    assert err["image_id"] == "obs_0001" and err["error"] == "ParseError"


def gt_estimates(rows, shift=0.0):
    return [DistanceEstimate(g.image_id, g.box_index, g.distance_m + shift, 20.0, 50, 0.0,
                             frozenset(), BoundingBox(0.1, 0.1, 0.2, 0.2, 0.9), g.transect_id) for g in rows]


@pytest.mark.parametrize("shift", [0.0, 1.0])
def test_evaluate_translation(tmp_path, shift):
    rows = [io.GroundTruthRow("T01", f"obs_{k:04d}", 0, 2.0 + k) for k in range(6)]
    io.write_groundtruth_csv(tmp_path / "gt.csv", rows)
    io.write_estimates_csv(tmp_path / "est.csv", gt_estimates(rows, shift))
    out = tmp_path / "out"
    assert run("evaluate", "--output", out, "--estimates", tmp_path / "est.csv", "--groundtruth", tmp_path / "gt.csv") == 0
    rep = io.load_report(out / "evaluation_report.json")
    assert rep["mean_error_m"] == pytest.approx(shift, abs=1e-12)
    assert rep["mean_abs_error_m"] == pytest.approx(shift, abs=1e-12)
    grid, est, gt = io.load_density_csv(out / "density.csv")
    assert grid.size == 251


def test_evaluate_half_unmatched(tmp_path):
    rows = [io.GroundTruthRow("T01", f"obs_{k:04d}", 0, 3.0) for k in range(8)]
    io.write_groundtruth_csv(tmp_path / "gt.csv", rows[:4])
    io.write_estimates_csv(tmp_path / "est.csv", gt_estimates(rows))
    out = tmp_path / "out"
    run("evaluate", "--output", out, "--estimates", tmp_path / "est.csv", "--groundtruth", tmp_path / "gt.csv")
    rep = io.load_report(out / "evaluation_report.json")
    assert rep["unmatched_estimates"] == 4 and rep["unmatched_fraction"] == 0.5 and rep["count"] == 4


def test_evaluate_excludes_low_inliers_unless_forced(tmp_path):
    rows = [io.GroundTruthRow("T01", f"obs_{k:04d}", 0, 3.0) for k in range(2)]
    io.write_groundtruth_csv(tmp_path / "gt.csv", rows)
    ests = gt_estimates(rows)
    ests[1] = DistanceEstimate(**{**ests[1].__dict__, "distance_m": 9.0, "flags": frozenset({"alignment_low_inliers"})})
    io.write_estimates_csv(tmp_path / "est.csv", ests)
    args = ["evaluate", "--estimates", tmp_path / "est.csv", "--groundtruth", tmp_path / "gt.csv"]
    run(*args, "--output", tmp_path / "a")
    run(*args, "--output", tmp_path / "b", "--force-low-inliers")
    a = io.load_report(tmp_path / "a" / "evaluation_report.json")
    b = io.load_report(tmp_path / "b" / "evaluation_report.json")
    assert (a["count"], a["excluded_low_inliers"], a["mean_abs_error_m"]) == (1, 1, 0.0)
    assert (b["count"], b["mean_abs_error_m"]) == (2, 3.0)


def write_spec(path, **kw):
    spec = {"transect_id": "S1", "width": 96, "height": 72, "focal_px": 60.0, "horizon_row": 20,
            "landmark_distances": [3.0, 15.0], "seed": 7, "noise_sigma": 0.001,
            "observations": [[{"distance_m": 5.0, "column": 48.0}]], **kw}
    path.write_text(json.dumps(spec))
    return path


def test_simulate_round_trip_and_determinism(tmp_path):
    spec = write_spec(tmp_path / "spec.json")
    assert run("simulate", "--spec", spec, "--output", tmp_path / "a") == 0
    assert run("simulate", "--spec", spec, "--output", tmp_path / "b") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    (lay,), skips = io.discover_transects(tmp_path / "a")
    assert lay.transect_id == "S1" and len(lay.references) == 2 and len(lay.observations) == 1
    assert skips == []


def test_simulate_bad_horizon(tmp_path):
    spec = write_spec(tmp_path / "spec.json", horizon_row=72)
    assert run("simulate", "--spec", spec, "--output", tmp_path / "a") == 1
    assert not (tmp_path / "a").exists()


def test_simulate_unreadable_spec(tmp_path):
    (tmp_path / "spec.json").write_text("{")
    assert run("simulate", "--spec", tmp_path / "spec.json", "--output", tmp_path / "a") == 1


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# survey defaults\npercentile = 30\njobs=4\nforce-planar = yes\ninlier_threshold = mad\n")
    assert parse_config_text(cfg.read_text()) == {"percentile": 30.0, "jobs": 4, "force_planar": True,
                                                   "inlier_threshold": None}
    merged = build_config(cfg, percentile=25.0)
    assert (merged.percentile, merged.jobs, merged.force_planar) == (25.0, 4, True)
    assert RunConfig().ransac.iterations == 2000
    with pytest.raises(ValueError):
        parse_config_text("nonsense = 1")


def test_bad_config_is_fatal(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("jobs = many\n")
    assert run("calibrate", "--config", cfg, "--input", tmp_path, "--output", tmp_path / "o") == 1


def test_missing_paths_is_fatal(tmp_path):
    assert run("calibrate", "--output", tmp_path / "o") == 1


def test_log_level_from_environment(tmp_path):
    (tmp_path / "in").mkdir()
    argv = [sys.executable, "-m", "trapmetric.cli", "calibrate", "--input", str(tmp_path / "in"),
            "--output", str(tmp_path / "out")]
    quiet = subprocess.run(argv, capture_output=True, text=True, env={**os.environ, "TRAPMETRIC_LOG": "warning"})
    loud = subprocess.run(argv, capture_output=True, text=True, env={**os.environ, "TRAPMETRIC_LOG": "info"})
    assert quiet.returncode == loud.returncode == 0
    assert "calibrated 0 transect" not in quiet.stderr
    assert "calibrated 0 transect" in loud.stderr
