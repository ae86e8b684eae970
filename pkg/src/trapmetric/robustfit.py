"""Robust 1D affine regression ``y ~ m*x + c`` under an L1 objective.

Hypotheses are drawn as point pairs (RANSAC), the consensus winner is then
refined on its inlier set by iteratively reweighted least squares, which
converges towards the least-absolute-deviations line.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from trapmetric.errors import DegenerateInput, NoConsensus

logger = logging.getLogger(__name__)

IRLS_EPS = 1e-9
MAD_THRESHOLD_FACTOR = 1.25
_BLOCK = 128  # hypotheses scored per vectorized block
_POLISH_POINTS = 6


@dataclass(frozen=True)
class RansacConfig:
    """Hyperparameters for :func:`fit_affine`.

    ``inlier_threshold=None`` means 1.25 x MAD of the y values, computed per
    call.
    """

    iterations: int = 2000
    inlier_threshold: Optional[float] = None
    min_inlier_fraction: float = 0.5
    seed: int = 0
    refit_iterations: int = 20

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be > 0")
        if not 0 < self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must be in (0, 1]")
        if self.refit_iterations < 0:
            raise ValueError("refit_iterations must be >= 0")


@dataclass(frozen=True)
class AffineFit:
    m: float
    c: float
    inlier_count: int
    inlier_fraction: float
    residual_l1: float

    def __call__(self, x):
        return evaluate_affine(self, x)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "c": self.c,
            "inlier_count": self.inlier_count,
            "inlier_fraction": self.inlier_fraction,
            "residual_l1": self.residual_l1,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffineFit":
        return cls(
            m=float(d["m"]),
            c=float(d["c"]),
            inlier_count=int(d["inlier_count"]),
            inlier_fraction=float(d["inlier_fraction"]),
            residual_l1=float(d["residual_l1"]),
        )


IDENTITY = AffineFit(m=1.0, c=0.0, inlier_count=0, inlier_fraction=1.0, residual_l1=0.0)


def evaluate_affine(fit: AffineFit, x):
    """Apply ``m*x + c``; works on scalars and arrays alike."""
    return fit.m * x + fit.c


def mad_threshold(y: np.ndarray) -> float:
    """Default inlier threshold: 1.25 x median absolute deviation of ``y``.

    Falls back to the mean absolute deviation, then to a tiny absolute value,
    so that exact or heavily tied data still get a positive threshold.
    """
    dev = np.abs(y - np.median(y))
    thr = MAD_THRESHOLD_FACTOR * float(np.median(dev))
    if thr <= 0:
        thr = MAD_THRESHOLD_FACTOR * float(np.mean(dev))
    if thr <= 0:
        thr = 1e-9 * max(1.0, float(np.max(np.abs(y))))
    return thr


def _as_xy(x, y=None):
    if y is None:
        # a sequence of (x, y) pairs
        arr = np.asarray(x, dtype=np.float64)
        if arr.size == 0:
            return np.empty(0), np.empty(0)
        arr = arr.reshape(-1, 2)
        x, y = arr[:, 0], arr[:, 1]
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"x and y differ in length: {x.size} vs {y.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be finite")
    return x, y


def solve_two_point(x0: float, y0: float, x1: float, y1: float) -> tuple[float, float]:
    """Exact line through two points with distinct x."""
    if x0 == x1:
        raise DegenerateInput("two samples share the same x")
    m = (y1 - y0) / (x1 - x0)
    c = y0 - m * x0
    return m, c


def _hypothesis_pairs(x: np.ndarray, iterations: int, rng: np.random.Generator):
    n = x.size
    n_pairs = n * (n - 1) // 2
    if n_pairs <= iterations:
        # small problems: enumerate every pair instead of sampling
        idx = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64)
        return idx[:, 0], idx[:, 1]
    i = rng.integers(0, n, size=iterations)
    j = (i + rng.integers(1, n, size=iterations)) % n
    return i, j


def _irls_l1(x, y, m, c, passes):
    """Refine (m, c) towards the L1 optimum; never returns a worse model.

    Iterations start from the unweighted least-squares line: starting from a
    two-point hypothesis would pin its two zero-residual samples at weight
    1/eps and the refit could never leave them.
    """
    best = (m, c)
    best_obj = float(np.sum(np.abs(y - (m * x + c))))
    design = np.column_stack([x, np.ones_like(x)])
    w = np.ones_like(x)
    for _ in range(passes):
        sw = np.sqrt(w)
        sol, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
        m, c = float(sol[0]), float(sol[1])
        if not (np.isfinite(m) and np.isfinite(c)):
            break
        r = y - (m * x + c)
        obj = float(np.sum(np.abs(r)))
        if obj < best_obj:
            best, best_obj = (m, c), obj
        w = 1.0 / np.maximum(np.abs(r), IRLS_EPS)
    return _vertex_polish(x, y, best, best_obj)


def _vertex_polish(x, y, best, best_obj, k=_POLISH_POINTS):
    # An L1 line optimum interpolates two samples; IRLS only approaches it.
    # Try lines through pairs of the k best-fitting samples.
    m, c = best
    near = np.argsort(np.abs(y - (m * x + c)), kind="stable")[:k]
    for a, b in itertools.combinations(near, 2):
        if x[a] == x[b]:
            continue
        mm, cc = solve_two_point(x[a], y[a], x[b], y[b])
        obj = float(np.sum(np.abs(y - (mm * x + cc))))
        if obj < best_obj:
            best, best_obj = (mm, cc), obj
    return best


def _finish(x, y, m, c, inl) -> AffineFit:
    r = np.abs(m * x + c - y)
    count = int(inl.sum())
    l1 = float(r[inl].mean()) if count else float("inf")
    return AffineFit(
        m=float(m),
        c=float(c),
        inlier_count=count,
        inlier_fraction=count / x.size,
        residual_l1=l1,
    )


def fit_affine(x, y=None, cfg: Optional[RansacConfig] = None) -> AffineFit:
    """Fit ``y ~ m*x + c`` robustly.

    ``x`` and ``y`` are equal-length arrays; alternatively pass a single
    sequence of ``(x, y)`` pairs as ``x``.

    The reported ``inlier_count`` is the consensus set of the winning
    hypothesis, i.e. the samples the L1 refit was computed on, and
    ``residual_l1`` is the refined model's mean absolute residual over it.

    Raises:
        DegenerateInput: fewer than two samples or all x equal.
        NoConsensus: the best hypothesis explains less than
            ``cfg.min_inlier_fraction`` of the samples. The exception carries
            the refined best model in ``.fit``.
    """
    return fit_affine_with_inliers(x, y, cfg)[0]


def fit_affine_with_inliers(x, y=None, cfg: Optional[RansacConfig] = None):
    """Like :func:`fit_affine` but also returns the boolean consensus mask."""
    cfg = cfg or RansacConfig()
    x, y = _as_xy(x, y)
    n = x.size
    if n < 2:
        raise DegenerateInput(f"need at least 2 samples, got {n}")
    if np.all(x == x[0]):
        raise DegenerateInput("all x values are equal; no affine map is defined")

    thr = cfg.inlier_threshold if cfg.inlier_threshold is not None else mad_threshold(y)
    rng = np.random.default_rng(cfg.seed)
    hi, hj = _hypothesis_pairs(x, cfg.iterations, rng)

    dx = x[hj] - x[hi]
    valid = dx != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        hm = np.where(valid, (y[hj] - y[hi]) / np.where(valid, dx, 1.0), 0.0)
    hc = y[hi] - hm * x[hi]

    counts = np.full(hm.size, -1, dtype=np.int64)
    l1 = np.full(hm.size, np.inf)
    buf = np.empty((min(_BLOCK, hm.size), n))
    inl = np.empty(buf.shape, dtype=bool)
    for start in range(0, hm.size, _BLOCK):
        sl = slice(start, start + _BLOCK)
        b = buf[: hm[sl].size]
        ib = inl[: b.shape[0]]
        # |m*x + c - y| evaluated in place, same operation order as _finish
        np.multiply(hm[sl, None], x[None, :], out=b)
        b += hc[sl, None]
        b -= y[None, :]
        np.abs(b, out=b)
        np.less_equal(b, thr, out=ib)
        cnt = ib.sum(axis=1)
        b *= ib
        mean_r = b.sum(axis=1) / np.maximum(cnt, 1)
        counts[sl] = np.where(valid[sl], cnt, -1)
        l1[sl] = np.where(valid[sl] & (cnt > 0), mean_r, np.inf)

    # most inliers, then lowest mean residual, then earliest hypothesis
    order = np.lexsort((np.arange(hm.size), l1, -counts))
    best = int(order[0])
    if counts[best] < 2:
        raise DegenerateInput("no valid two-point hypothesis")
    m0, c0 = float(hm[best]), float(hc[best])
    inliers = np.abs(m0 * x + c0 - y) <= thr
    m, c = _irls_l1(x[inliers], y[inliers], m0, c0, cfg.refit_iterations)
    fit = _finish(x, y, m, c, inliers)

    best_fraction = counts[best] / n
    logger.debug(
        "fit_affine n=%d thr=%.3g hypotheses=%d consensus=%.3f m=%.6g c=%.6g",
        n, thr, hm.size, best_fraction, m, c,
    )
    if best_fraction < cfg.min_inlier_fraction:
        raise NoConsensus(
            f"best consensus {best_fraction:.3f} below {cfg.min_inlier_fraction}", fit=fit
        )
    return fit, inliers


def l1_objective(x, y, m: float, c: float) -> float:
    """Sum of absolute residuals of ``m*x + c`` against ``y``."""
    x, y = _as_xy(x, y)
    return float(np.sum(np.abs(m * x + c - y)))
