"""Per-transect calibration of reference disparity maps to metric scale.

Disparity maps are 2D float arrays (rows x columns); masks are 2D bool arrays
of the same shape where True marks landmark (or otherwise excluded) pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from trapmetric.errors import (
    CalibrationDegenerate,
    CalibrationError,
    DimensionMismatch,
    EmptyMask,
    RobustFitError,
    TooFewReferences,
)
from trapmetric.robustfit import (
    IDENTITY,
    AffineFit,
    RansacConfig,
    evaluate_affine,
    fit_affine,
    solve_two_point,
)

logger = logging.getLogger(__name__)

MAX_FIT_PIXELS = 20_000
DISPARITY_FLOOR = 1e-6
SPREAD_EPSILON = 0.02


def as_disparity(values) -> np.ndarray:
    d = np.asarray(values, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
        raise ValueError(f"disparity map must be a non-empty 2D array, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("disparity map contains non-finite values")
    return d


def as_mask(bits, shape=None) -> np.ndarray:
    m = np.asarray(bits).astype(bool, copy=False)
    if shape is not None and m.shape != tuple(shape):
        raise DimensionMismatch(f"mask shape {m.shape} does not match raster shape {tuple(shape)}")
    return m


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ReferenceSample:
    """One reference frame: raw disparity, landmark mask and measured distance."""

    disparity: np.ndarray
    landmark_mask: np.ndarray
    landmark_distance_m: float
    name: str = ""

    def __post_init__(self):
        d = as_disparity(self.disparity)
        m = as_mask(self.landmark_mask, d.shape)
        if not m.any():
            raise EmptyMask(f"reference {self.name!r} has an empty landmark mask")
        if not (np.isfinite(self.landmark_distance_m) and self.landmark_distance_m > 0):
            raise ValueError("landmark distance must be a positive finite number of meters")
        object.__setattr__(self, "disparity", d)
        object.__setattr__(self, "landmark_mask", m)


@dataclass(frozen=True)
class CalibrationDiagnostics:
    landmark_disparity_spread: float
    landmark_count: int
    max_landmark_residual_m: float
    planar_warning: bool

    def to_dict(self) -> dict:
        return {
            "landmark_disparity_spread": self.landmark_disparity_spread,
            "landmark_count": self.landmark_count,
            "max_landmark_residual_m": self.max_landmark_residual_m,
            "planar_warning": self.planar_warning,
        }


@dataclass(frozen=True)
class TransectCalibration:
    """Calibrated target reference plus every fit that produced it.

    ``target_disparity_calibrated`` is in 1/m. Negative values can occur in
    far background after the shift; they become invalid in
    :func:`disparity_to_depth`.
    """

    target_disparity_calibrated: np.ndarray
    target_mask: np.ndarray
    metric_fit: AffineFit
    per_reference_fits: tuple[AffineFit, ...]
    diagnostics: CalibrationDiagnostics
    target_index: int
    landmark_medians: tuple[float, ...] = field(default=())
    landmark_distances_m: tuple[float, ...] = field(default=())
    target_disparity_range: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "target_disparity_calibrated", _frozen(self.target_disparity_calibrated)
        )
        object.__setattr__(self, "target_mask", _frozen(as_mask(self.target_mask)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.target_disparity_calibrated.shape

    def target_depth(self, disparity_floor: float = DISPARITY_FLOOR):
        return disparity_to_depth(self.target_disparity_calibrated, disparity_floor)


def median_masked_disparity(d, mask) -> float:
    """Median disparity over the set pixels of ``mask``."""
    d = np.asarray(d, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if d.shape != mask.shape:
        raise DimensionMismatch(f"disparity {d.shape} vs mask {mask.shape}")
    vals = d[mask]
    if vals.size == 0:
        raise EmptyMask("mask has no set pixels")
    return float(np.median(vals))


def scene_pixel_pairs(x_map, y_map, exclude, max_pixels: int, seed: int):
    """Pixel values of two rasters over non-excluded pixels, seeded subsample."""
    idx = np.flatnonzero(~exclude.ravel())
    if idx.size > max_pixels:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(idx, size=max_pixels, replace=False))
    return x_map.ravel()[idx], y_map.ravel()[idx]


def align_to_target(
    d_i,
    m_i,
    d_target,
    m_target,
    cfg: Optional[RansacConfig] = None,
    max_fit_pixels: int = MAX_FIT_PIXELS,
) -> AffineFit:
    """Fit the map taking ``d_i`` onto the scale of ``d_target``.

    Only pixels outside both landmark masks take part.
    """
    cfg = cfg or RansacConfig()
    d_i, d_target = np.asarray(d_i, dtype=np.float64), np.asarray(d_target, dtype=np.float64)
    if d_i.shape != d_target.shape:
        raise DimensionMismatch(f"disparity shapes differ: {d_i.shape} vs {d_target.shape}")
    m_i = as_mask(m_i, d_i.shape)
    m_target = as_mask(m_target, d_i.shape)
    x, y = scene_pixel_pairs(d_i, d_target, m_i | m_target, max_fit_pixels, cfg.seed)
    try:
        return fit_affine(x, y, cfg)
    except RobustFitError as exc:
        raise CalibrationError(f"reference alignment failed: {exc}") from exc


def disparity_to_depth(c, disparity_floor: float = DISPARITY_FLOOR):
    """Invert calibrated disparity into metric depth.

    Returns ``(depth, valid)``; pixels at or below ``disparity_floor`` are
    clamped to ``1/disparity_floor`` and marked invalid.
    """
    c = np.asarray(c, dtype=np.float64)
    valid = c > disparity_floor
    depth = 1.0 / np.maximum(c, disparity_floor)
    return depth, valid


def _select_target(refs: Sequence[ReferenceSample]) -> int:
    dist = np.array([r.landmark_distance_m for r in refs])
    if np.unique(dist).size != dist.size:
        raise CalibrationError("reference landmark distances must be pairwise distinct")
    return int(np.argmax(dist))


def _diagnose(fit: AffineFit, medians, distances, target_range, spread_epsilon):
    medians = np.asarray(medians, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    spread_abs = float(medians.max() - medians.min())
    spread = spread_abs / target_range if target_range > 0 else 0.0
    if fit is None:
        residual = float("inf")
    else:
        pred = evaluate_affine(fit, medians)
        with np.errstate(divide="ignore"):
            z = np.where(pred > 0, 1.0 / np.where(pred > 0, pred, 1.0), np.inf)
        residual = float(np.max(np.abs(z - distances)))
    return CalibrationDiagnostics(
        landmark_disparity_spread=spread,
        landmark_count=int(medians.size),
        max_landmark_residual_m=residual,
        planar_warning=bool(spread < spread_epsilon),
    )


def fit_metric_scale(medians, distances_m, cfg: Optional[RansacConfig] = None) -> AffineFit:
    """Map aligned landmark medians onto inverse landmark distance (1/m).

    Two landmarks determine the map exactly and are solved directly.
    """
    x = np.asarray(medians, dtype=np.float64)
    y = 1.0 / np.asarray(distances_m, dtype=np.float64)
    if x.size == 2:
        m, c = solve_two_point(x[0], y[0], x[1], y[1])
        return AffineFit(m=m, c=c, inlier_count=2, inlier_fraction=1.0,
                         residual_l1=float(np.mean(np.abs(m * x + c - y))))
    return fit_affine(x, y, cfg)


def calibrate_transect(
    refs: Sequence[ReferenceSample],
    cfg: Optional[RansacConfig] = None,
    *,
    max_fit_pixels: int = MAX_FIT_PIXELS,
    spread_epsilon: float = SPREAD_EPSILON,
    force: bool = False,
) -> TransectCalibration:
    """Calibrate a transect from two or more landmark references.

    The reference with the largest landmark distance is the target. Every
    other reference is aligned onto it, landmark medians are taken in the
    aligned scale and regressed against inverse landmark distance; the
    resulting map turns the target disparity into metric inverse depth.

    Raises:
        TooFewReferences: fewer than two references.
        CalibrationDegenerate: landmark medians spread less than
            ``spread_epsilon`` of the target disparity range (skipped with
            ``force`` as long as a fit is still possible).
        CalibrationError: alignment or metric fit failed.
    """
    cfg = cfg or RansacConfig()
    refs = list(refs)
    if len(refs) < 2:
        raise TooFewReferences(f"need at least 2 references, got {len(refs)}")
    shape = refs[0].disparity.shape
    for r in refs:
        if r.disparity.shape != shape:
            raise DimensionMismatch(
                f"reference {r.name!r} has shape {r.disparity.shape}, expected {shape}"
            )
    t = _select_target(refs)
    target = refs[t]

    fits: list[AffineFit] = []
    medians: list[float] = []
    for i, r in enumerate(refs):
        if i == t:
            fit_i = IDENTITY
        else:
            fit_i = align_to_target(
                r.disparity, r.landmark_mask, target.disparity, target.landmark_mask,
                cfg, max_fit_pixels,
            )
        fits.append(fit_i)
        medians.append(float(evaluate_affine(fit_i, median_masked_disparity(r.disparity, r.landmark_mask))))

    distances = [r.landmark_distance_m for r in refs]
    target_range = float(target.disparity.max() - target.disparity.min())
    pre = _diagnose(None, medians, distances, target_range, spread_epsilon)
    if pre.planar_warning and not force:
        raise CalibrationDegenerate(
            f"landmark disparity spread {pre.landmark_disparity_spread:.4g} below "
            f"{spread_epsilon}; landmarks appear to lie in a single plane"
        )

    try:
        metric = fit_metric_scale(medians, distances, cfg)
    except RobustFitError as exc:
        if pre.planar_warning:
            raise CalibrationDegenerate(f"landmarks cannot be separated: {exc}") from exc
        raise CalibrationError(f"metric calibration failed: {exc}") from exc
    if metric.m == 0 or not np.isfinite(metric.m):
        raise CalibrationDegenerate("metric calibration produced a zero scale")

    diag = _diagnose(metric, medians, distances, target_range, spread_epsilon)
    calibrated = evaluate_affine(metric, target.disparity)
    logger.info(
        "calibrated transect: target=%s (%.2f m), m*=%.6g c*=%.6g, spread=%.3f, max residual=%.3f m",
        target.name or t, target.landmark_distance_m, metric.m, metric.c,
        diag.landmark_disparity_spread, diag.max_landmark_residual_m,
    )
    return TransectCalibration(
        target_disparity_calibrated=calibrated,
        target_mask=target.landmark_mask,
        metric_fit=metric,
        per_reference_fits=tuple(fits),
        diagnostics=diag,
        target_index=t,
        landmark_medians=tuple(medians),
        landmark_distances_m=tuple(float(z) for z in distances),
        target_disparity_range=target_range,
    )


def calibration_diagnostics(
    cal: TransectCalibration,
    refs: Sequence[ReferenceSample],
    spread_epsilon: float = SPREAD_EPSILON,
) -> CalibrationDiagnostics:
    """Recompute diagnostics for ``cal`` from the raw references."""
    if len(refs) != len(cal.per_reference_fits):
        raise ValueError("reference count does not match the calibration")
    medians = [
        float(evaluate_affine(f, median_masked_disparity(r.disparity, r.landmark_mask)))
        for f, r in zip(cal.per_reference_fits, refs)
    ]
    target = refs[cal.target_index]
    target_range = float(target.disparity.max() - target.disparity.min())
    return _diagnose(
        cal.metric_fit, medians, [r.landmark_distance_m for r in refs], target_range, spread_epsilon
    )

