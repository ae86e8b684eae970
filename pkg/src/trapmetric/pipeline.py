"""Batch runners behind the CLI subcommands.

Each runner works transect by transect (and observation by observation),
records failures instead of raising, and writes its outputs atomically in a
canonical order so that runs are reproducible at any parallelism.
"""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from trapmetric import io
from trapmetric.calibration import (
    DISPARITY_FLOOR,
    MAX_FIT_PIXELS,
    SPREAD_EPSILON,
    CalibrationDiagnostics,
    ReferenceSample,
    TransectCalibration,
    calibrate_transect,
)
from trapmetric.errors import (
    CalibrationDegenerate,
    CalibrationMissing,
    DimensionMismatch,
    SpecError,
    TrapMetricError,
)
from trapmetric.estimation import FLAG_LOW_INLIERS, DistanceEstimate, estimate_observation
from trapmetric.metrics import PairedMeasurement, evaluate
from trapmetric.robustfit import AffineFit, RansacConfig
from trapmetric import simulator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2

CALIBRATION_DIR = "calibration"


@dataclass(frozen=True)
class RunConfig:
    input: Optional[str] = None
    output: Optional[str] = None
    percentile: float = 20.0
    confidence: float = 0.5
    categories: str = "animal"
    seed: int = 0
    iterations: int = 2000
    inlier_threshold: Optional[float] = None
    min_inlier_fraction: float = 0.5
    refit_iterations: int = 20
    max_fit_pixels: int = MAX_FIT_PIXELS
    disparity_floor: float = DISPARITY_FLOOR
    spread_epsilon: float = SPREAD_EPSILON
    strip_rows: int = io.METADATA_STRIP_ROWS
    jobs: int = 1
    force_planar: bool = False
    force_low_inliers: bool = False

    @property
    def ransac(self) -> RansacConfig:
        return RansacConfig(
            iterations=self.iterations,
            inlier_threshold=self.inlier_threshold,
            min_inlier_fraction=self.min_inlier_fraction,
            seed=self.seed,
            refit_iterations=self.refit_iterations,
        )

    @property
    def category_set(self) -> tuple:
        return tuple(c.strip() for c in self.categories.split(",") if c.strip())


def _coerce(name: str, raw: str):
    f = {f.name: f for f in fields(RunConfig)}[name]
    default = f.default
    if name == "inlier_threshold":
        return None if raw.lower() in ("", "none", "mad") else float(raw)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def build_config(config_path=None, **overrides) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (non-None)."""
    values = {}
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _error_record(exc: Exception, **where) -> dict:
    return {**where, "error": type(exc).__name__, "message": str(exc)}


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------


def load_references(layout: io.TransectLayout, cfg: RunConfig) -> list[ReferenceSample]:
    disps = [io.load_disparity(r.disparity_path) for r in layout.references]
    masks = [io.load_mask(r.mask_path) for r in layout.references]
    canonical = min(a.shape[0] for a in disps + masks)
    refs = []
    for r, d, m in zip(layout.references, disps, masks):
        d = io.crop_metadata_strip(d, cfg.strip_rows, canonical)
        m = io.crop_metadata_strip(m, cfg.strip_rows, canonical)
        if d.shape != m.shape:
            raise DimensionMismatch(f"{r.image}: disparity {d.shape} vs mask {m.shape}")
        refs.append(ReferenceSample(d, m, r.distance_m, name=r.image))
    return refs


def calibration_record(layout: io.TransectLayout, cal: TransectCalibration) -> dict:
    return {
        "transect_id": layout.transect_id,
        "status": "ok",
        "target_image": layout.references[cal.target_index].image,
        "target_index": cal.target_index,
        "shape": list(cal.shape),
        "metric_fit": cal.metric_fit.to_dict(),
        "per_reference": [
            {
                "image": r.image,
                "distance_m": r.distance_m,
                "aligned_median": med,
                "fit": f.to_dict(),
            }
            for r, f, med in zip(layout.references, cal.per_reference_fits, cal.landmark_medians)
        ],
        "diagnostics": cal.diagnostics.to_dict(),
    }


def _calibrate_one(layout: io.TransectLayout, cfg: RunConfig, out_dir: Path) -> dict:
    tdir = out_dir / CALIBRATION_DIR / layout.transect_id
    try:
        refs = load_references(layout, cfg)
        cal = calibrate_transect(
            refs, cfg.ransac,
            max_fit_pixels=cfg.max_fit_pixels,
            spread_epsilon=cfg.spread_epsilon,
            force=cfg.force_planar,
        )
    except (TrapMetricError, ValueError, OSError) as exc:
        # never leave a stale calibration behind for the estimate step
        shutil.rmtree(tdir, ignore_errors=True)
        rec = _error_record(exc, transect_id=layout.transect_id)
        rec["status"] = "skipped"
        rec["planar_warning"] = isinstance(exc, CalibrationDegenerate)
        logger.warning("calibration of %s failed: %s", layout.transect_id, exc)
        return rec
    rec = calibration_record(layout, cal)
    io.write_disparity(tdir / "target_calibrated.pfm", cal.target_disparity_calibrated)
    io.write_mask(tdir / "target_mask.pgm", cal.target_mask)
    io.write_report(tdir / "calibration.json", rec)
    return rec


def run_calibrate(cfg: RunConfig) -> int:
    out_dir = Path(cfg.output)
    layouts, skips = io.discover_transects(cfg.input)
    records = _pmap(lambda lay: _calibrate_one(lay, cfg, out_dir), layouts, cfg.jobs)
    calibrated = {r["transect_id"]: r for r in records if r["status"] == "ok"}
    skipped = [s.to_dict() for s in skips] + [
        {k: r[k] for k in ("transect_id", "error", "message", "planar_warning")}
        for r in records if r["status"] != "ok"
    ]
    skipped.sort(key=lambda s: s["transect_id"])
    report = {"transects": calibrated, "skipped": skipped}
    io.write_report(out_dir / "calibration_report.json", report)
    logger.info("calibrated %d transect(s), skipped %d", len(calibrated), len(skipped))
    return EXIT_PARTIAL if skipped else EXIT_OK


def load_calibration(out_dir, transect_id: str) -> TransectCalibration:
    tdir = Path(out_dir) / CALIBRATION_DIR / transect_id
    paths = [tdir / n for n in ("target_calibrated.pfm", "target_mask.pgm", "calibration.json")]
    if not all(p.is_file() for p in paths):
        raise CalibrationMissing(f"no calibration artifacts for transect {transect_id}")
    rec = io.load_report(paths[2])
    diag = rec["diagnostics"]
    return TransectCalibration(
        target_disparity_calibrated=io.load_disparity(paths[0]),
        target_mask=io.load_mask(paths[1]),
        metric_fit=AffineFit.from_dict(rec["metric_fit"]),
        per_reference_fits=tuple(AffineFit.from_dict(r["fit"]) for r in rec["per_reference"]),
        diagnostics=CalibrationDiagnostics(
            landmark_disparity_spread=diag["landmark_disparity_spread"],
            landmark_count=diag["landmark_count"],
            max_landmark_residual_m=(
                float("inf") if diag["max_landmark_residual_m"] is None else diag["max_landmark_residual_m"]
            ),
            planar_warning=diag["planar_warning"],
        ),
        target_index=rec["target_index"],
        landmark_medians=tuple(r["aligned_median"] for r in rec["per_reference"]),
        landmark_distances_m=tuple(r["distance_m"] for r in rec["per_reference"]),
    )


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _estimate_one(args):
    layout, obs, cal, cfg = args
    where = {"transect_id": layout.transect_id, "image_id": obs.image_id}
    try:
        det = io.load_detections(obs.detection_path)
        d = io.load_disparity(obs.disparity_path)
        d = io.crop_metadata_strip(d, cfg.strip_rows, cal.shape[0])
        ests = estimate_observation(
            d, det, cal, cfg.ransac,
            percentile=cfg.percentile,
            confidence=cfg.confidence,
            categories=cfg.category_set,
            max_fit_pixels=cfg.max_fit_pixels,
            disparity_floor=cfg.disparity_floor,
            transect_id=layout.transect_id,
        )
    except (TrapMetricError, ValueError, OSError) as exc:
        logger.warning("%s/%s: %s", layout.transect_id, obs.image_id, exc)
        return [], {**_error_record(exc, **where), "status": "error"}
    rec = {
        **where,
        "status": "ok",
        "detections": len(det.boxes),
        "estimates": len(ests),
        "low_inliers": any(FLAG_LOW_INLIERS in e.flags for e in ests),
    }
    return ests, rec


def run_estimate(cfg: RunConfig) -> int:
    out_dir = Path(cfg.output)
    layouts, skips = io.discover_transects(cfg.input)
    tasks, errors = [], [s.to_dict() | {"error": "TransectSkipped"} for s in skips]
    for layout in layouts:
        try:
            cal = load_calibration(out_dir, layout.transect_id)
        except (TrapMetricError, ValueError, OSError, KeyError) as exc:
            errors.append(_error_record(exc, transect_id=layout.transect_id))
            continue
        tasks.extend((layout, obs, cal, cfg) for obs in layout.observations)
    results = _pmap(_estimate_one, tasks, cfg.jobs)
    estimates: list[DistanceEstimate] = []
    processed = []
    for ests, rec in results:
        estimates.extend(ests)
        processed.append(rec)
        if rec["status"] != "ok":
            errors.append({k: v for k, v in rec.items() if k != "status"})
    io.write_estimates_csv(out_dir / "estimates.csv", estimates)
    errors.sort(key=lambda e: (e.get("transect_id", ""), e.get("image_id", "")))
    io.write_report(out_dir / "estimation_report.json", {"observations": processed, "errors": errors})
    logger.info("wrote %d estimate(s) from %d observation(s)", len(estimates), len(processed))
    return EXIT_PARTIAL if errors else EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def collect_groundtruth(root) -> list[io.GroundTruthRow]:
    rows = []
    root = Path(root)
    if root.is_file():
        return io.load_groundtruth_csv(root)
    for p in sorted(root.glob("*/groundtruth.csv")):
        rows.extend(io.load_groundtruth_csv(p))
    return rows


def join_pairs(estimates, groundtruth, include_low_inliers: bool = False):
    """Match estimates to ground truth on (transect_id, image_id, box_index)."""
    gt = {g.key: g for g in groundtruth}
    pairs, unmatched, excluded = [], 0, 0
    used = set()
    for e in sorted(estimates, key=lambda e: e.key):
        if FLAG_LOW_INLIERS in e.flags and not include_low_inliers:
            excluded += 1
            continue
        g = gt.get(e.key)
        if g is None:
            unmatched += 1
            continue
        used.add(e.key)
        pairs.append(PairedMeasurement(e.distance_m, g.distance_m, e.transect_id, e.image_id, e.box_index))
    return pairs, unmatched, len(gt) - len(used), excluded


def run_evaluate(cfg: RunConfig, estimates_path=None, groundtruth_path=None) -> int:
    out_dir = Path(cfg.output)
    estimates = io.load_estimates_csv(estimates_path or out_dir / "estimates.csv")
    groundtruth = collect_groundtruth(groundtruth_path or cfg.input)
    pairs, unmatched_est, unmatched_gt, excluded = join_pairs(
        estimates, groundtruth, include_low_inliers=cfg.force_low_inliers
    )
    if unmatched_est or unmatched_gt:
        logger.warning("join: %d estimate(s) and %d ground-truth row(s) unmatched", unmatched_est, unmatched_gt)
    if not pairs:
        total = unmatched_est
        io.write_report(out_dir / "evaluation_report.json", {
            "count": 0, "mean_error_m": None, "mean_abs_error_m": None, "per_transect": {},
            "unmatched_estimates": unmatched_est, "unmatched_groundtruth": unmatched_gt,
            "unmatched_fraction": 1.0 if total else 0.0, "excluded_low_inliers": excluded,
        })
        return EXIT_PARTIAL
    report = evaluate(pairs)
    report.unmatched_estimates = unmatched_est
    report.unmatched_groundtruth = unmatched_gt
    report.excluded_low_inliers = excluded
    io.write_report(out_dir / "evaluation_report.json", report.to_dict())
    io.write_density_csv(out_dir / "density.csv", report.grid_m, report.density_est, report.density_gt)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def write_transect(scene: simulator.SyntheticScene, root, transect_id: str) -> Path:
    """Write a synthetic scene in the input layout under ``root/transect_id``."""
    io.check_identifier(transect_id)
    tdir = Path(root) / transect_id
    records = []
    for i, ref in enumerate(scene.references):
        stem = f"ref_{i:02d}"
        io.write_disparity(tdir / "references" / f"{stem}.pfm", ref.disparity)
        io.write_mask(tdir / "references" / f"{stem}_mask.pgm", ref.landmark_mask)
        records.append(io.ReferenceRecord(transect_id, f"{stem}.png", f"{stem}.pfm", f"{stem}_mask.pgm",
                                          float(ref.landmark_distance_m)))
    io.write_reference_csv(tdir / "references.csv", records)
    gt = []
    (tdir / "observations").mkdir(parents=True, exist_ok=True)
    for obs in scene.observations:
        io.write_disparity(tdir / "observations" / f"{obs.image_id}.pfm", obs.disparity)
        io.write_detections(tdir / "detections" / f"{obs.image_id}.json", obs.detections)
        gt.extend(io.GroundTruthRow(transect_id, obs.image_id, k, z) for k, z in enumerate(obs.ground_truth_m))
    io.write_groundtruth_csv(tdir / "groundtruth.csv", gt)
    return tdir


def scene_from_entry(entry: dict) -> simulator.SyntheticScene:
    entry = dict(entry)
    noise_fraction = entry.pop("noise_range_fraction", None)
    perturb = entry.pop("perturb_fraction", 0.0)
    perturb_seed = entry.pop("perturb_seed", 0)
    spec = simulator.spec_from_dict(entry)
    if noise_fraction is not None:
        rng_span = simulator.disparity_range(simulator.generate_scene(replace(spec, noise_sigma=0.0)))
        spec = replace(spec, noise_sigma=float(noise_fraction) * rng_span)
    scene = simulator.generate_scene(spec)
    if perturb:
        scene = simulator.perturb_scene(scene, float(perturb), int(perturb_seed))
    return scene


def run_simulate(spec_path, out_root) -> int:
    """Render every transect described in a JSON spec file.

    The file holds one transect object or ``{"transects": [...]}``; each
    transect object carries ``transect_id`` plus scene fields.
    """
    try:
        doc = json.loads(Path(spec_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        logger.error("cannot read simulation spec: %s", exc)
        return EXIT_FATAL
    entries = doc["transects"] if isinstance(doc, dict) and "transects" in doc else [doc]
    try:
        scenes = []
        for i, entry in enumerate(entries):
            tid = str(entry.get("transect_id", f"T{i + 1:02d}"))
            scenes.append((tid, scene_from_entry(entry)))
    except (SpecError, ValueError, TypeError) as exc:
        logger.error("invalid simulation spec: %s", exc)
        return EXIT_FATAL
    for tid, scene in scenes:
        write_transect(scene, out_root, tid)
    return EXIT_OK
