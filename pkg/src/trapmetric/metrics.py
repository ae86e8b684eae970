"""Evaluation metrics, per-transect box-plot statistics and KDE export."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from trapmetric.errors import EmptyInput

logger = logging.getLogger(__name__)

FALLBACK_BANDWIDTH_M = 0.1
GRID_START_M = 0.0
GRID_STOP_M = 25.0
GRID_STEP_M = 0.1


class PairedMeasurement(NamedTuple):
    z_est: float
    z_gt: float
    transect_id: str = ""
    image_id: str = ""
    box_index: int = 0


def linear_percentile(sorted_values: Sequence[float], p: float) -> float:
    """Percentile of ascending values, interpolating linearly between ranks.

    rank = p/100 * (n-1); the result is v[floor] + frac * (v[floor+1] - v[floor]).
    """
    n = len(sorted_values)
    if n == 0:
        raise EmptyInput("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    r = (p / 100.0) * (n - 1)
    k = math.floor(r)
    frac = r - k
    lo = float(sorted_values[k])
    if frac == 0.0 or k + 1 >= n:
        return lo
    return lo + frac * (float(sorted_values[k + 1]) - lo)


def _errors(pairs) -> np.ndarray:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("no paired measurements")
    est = np.array([p[0] for p in pairs], dtype=np.float64)
    gt = np.array([p[1] for p in pairs], dtype=np.float64)
    return est - gt


def mean_error(pairs: Iterable) -> float:
    """Mean signed error (estimate minus ground truth) in meters.

    ``pairs`` holds :class:`PairedMeasurement` items or plain ``(est, gt)``
    tuples.
    """
    return float(np.mean(_errors(pairs)))


def mean_abs_error(pairs: Iterable) -> float:
    return float(np.mean(np.abs(_errors(pairs))))


def silverman_bandwidth(values) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), with fallbacks for tied data.

    If the IQR is zero the standard deviation alone is used; if both are
    zero the bandwidth falls back to 0.1 m.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    if n == 0:
        raise EmptyInput("bandwidth of an empty sample")
    std = float(np.std(v))
    iqr = linear_percentile(v, 75) - linear_percentile(v, 25)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if spread <= 0:
        logger.warning("degenerate bandwidth (all %d values identical); using %.2f m", n, FALLBACK_BANDWIDTH_M)
        return FALLBACK_BANDWIDTH_M
    return 0.9 * spread * n ** (-0.2)


def density_grid(start: float = GRID_START_M, stop: float = GRID_STOP_M, step: float = GRID_STEP_M):
    count = int(round((stop - start) / step)) + 1
    return np.linspace(start, stop, count)


def density_export(
    distances,
    grid: Optional[np.ndarray] = None,
    bandwidth: Optional[float] = None,
):
    """Gaussian KDE of ``distances`` on ``grid``, renormalized to unit area.

    Returns ``(grid, density)``. The trapezoidal integral of ``density`` over
    ``grid`` is 1. The bandwidth is never smaller than the grid spacing.
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise EmptyInput("density of an empty sample")
    grid = density_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    h = silverman_bandwidth(d) if bandwidth is None else float(bandwidth)
    step = float(np.min(np.diff(grid))) if grid.size > 1 else 0.0
    if h < step:
        # narrower kernels fall between grid nodes and lose their mass
        logger.warning("bandwidth %.3g m below grid spacing; using %.3g m", h, step)
        h = step
    dens = np.zeros_like(grid)
    # chunked to bound memory for large surveys
    for start in range(0, d.size, 4096):
        u = (grid[:, None] - d[None, start:start + 4096]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= d.size * h * math.sqrt(2 * math.pi)
    area = float(np.trapezoid(dens, grid))
    if not area > 0:
        raise ValueError("no density mass falls on the grid")
    return grid, dens / area


@dataclass(frozen=True)
class BoxStats:
    count: int
    mean_error: float
    mean_abs_error: float
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def box_stats(errors) -> BoxStats:
    """Tukey box-plot summary of signed errors."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise EmptyInput("box statistics of an empty sample")
    q1, med, q3 = (linear_percentile(e, p) for p in (25, 50, 75))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = e[(e >= lo_fence) & (e <= hi_fence)]
    return BoxStats(
        count=int(e.size),
        mean_error=float(np.mean(e)),
        mean_abs_error=float(np.mean(np.abs(e))),
        q1=q1,
        median=med,
        q3=q3,
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=int(e.size - inside.size),
    )


def boxplot_stats(pairs: Iterable[PairedMeasurement]) -> dict[str, BoxStats]:
    """Box statistics of estimation error per transect, keyed by transect id."""
    groups: dict[str, list[float]] = defaultdict(list)
    for p in pairs:
        groups[p.transect_id].append(p.z_est - p.z_gt)
    if not groups:
        raise EmptyInput("no paired measurements")
    return {tid: box_stats(errs) for tid, errs in sorted(groups.items())}


@dataclass
class EvaluationReport:
    mean_error_m: float
    mean_abs_error_m: float
    count: int
    per_transect: dict[str, BoxStats]
    grid_m: np.ndarray = field(repr=False)
    density_est: np.ndarray = field(repr=False)
    density_gt: np.ndarray = field(repr=False)
    unmatched_estimates: int = 0
    unmatched_groundtruth: int = 0
    excluded_low_inliers: int = 0

    def to_dict(self) -> dict:
        total = self.count + self.unmatched_estimates
        return {
            "count": self.count,
            "mean_error_m": self.mean_error_m,
            "mean_abs_error_m": self.mean_abs_error_m,
            "per_transect": {k: v.to_dict() for k, v in self.per_transect.items()},
            "unmatched_estimates": self.unmatched_estimates,
            "unmatched_groundtruth": self.unmatched_groundtruth,
            "unmatched_fraction": self.unmatched_estimates / total if total else 0.0,
            "excluded_low_inliers": self.excluded_low_inliers,
        }


def evaluate(pairs: Sequence[PairedMeasurement], grid: Optional[np.ndarray] = None) -> EvaluationReport:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("no paired measurements to evaluate")
    grid = density_grid() if grid is None else grid
    _, dens_est = density_export([p.z_est for p in pairs], grid)
    _, dens_gt = density_export([p.z_gt for p in pairs], grid)
    return EvaluationReport(
        mean_error_m=mean_error(pairs),
        mean_abs_error_m=mean_abs_error(pairs),
        count=len(pairs),
        per_transect=boxplot_stats(pairs),
        grid_m=grid,
        density_est=dens_est,
        density_gt=dens_gt,
    )
