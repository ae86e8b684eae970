"""Per-observation distance estimation against a calibrated transect."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from trapmetric.calibration import (
    DISPARITY_FLOOR,
    MAX_FIT_PIXELS,
    TransectCalibration,
    as_disparity,
    as_mask,
    disparity_to_depth,
    scene_pixel_pairs,
)
from trapmetric.errors import DimensionMismatch, EmptyBox, NoConsensus, SchemaError
from trapmetric.metrics import linear_percentile
from trapmetric.robustfit import AffineFit, RansacConfig, evaluate_affine, fit_affine

logger = logging.getLogger(__name__)

CATEGORIES = ("animal", "human", "vehicle")
DEFAULT_PERCENTILE = 20.0
DEFAULT_CONFIDENCE = 0.5
TINY_BOX_PIXELS = 25
CAPPED_FRACTION = 0.5
# below this share of usable scene pixels the alignment has no evidence
MIN_SCENE_FRACTION = 1e-3
_COORD_SLACK = 1e-9

FLAG_CAPPED = "capped_depth"
FLAG_TINY = "tiny_box"
FLAG_LOW_INLIERS = "alignment_low_inliers"


@dataclass(frozen=True)
class BoundingBox:
    """Detector box in normalized image coordinates, (x, y) = top-left."""

    x: float
    y: float
    w: float
    h: float
    confidence: float = 1.0
    category: str = "animal"

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h, self.confidence)
        if not all(math.isfinite(v) for v in vals):
            raise SchemaError(f"non-finite box field in {self}")
        if self.x < 0 or self.y < 0 or self.w <= 0 or self.h <= 0:
            raise SchemaError(f"box out of range: {self}")
        if self.x + self.w > 1 + _COORD_SLACK or self.y + self.h > 1 + _COORD_SLACK:
            raise SchemaError(f"box exceeds the image: {self}")
        if not 0 <= self.confidence <= 1:
            raise SchemaError(f"confidence must be in [0, 1]: {self}")
        if self.category not in CATEGORIES:
            raise SchemaError(f"unknown category {self.category!r}")

    def pixel_bounds(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Half-open pixel window ``(u0, v0, u1, v1)``: floor min, ceil max."""
        u0 = _floor(self.x * width)
        v0 = _floor(self.y * height)
        u1 = min(width, _ceil((self.x + self.w) * width))
        v1 = min(height, _ceil((self.y + self.h) * height))
        return max(0, u0), max(0, v0), u1, v1


def _snap(v: float) -> float:
    # normalized coords written from integer pixel edges come back off by an ulp
    r = round(v)
    return float(r) if abs(v - r) < 1e-7 else v


def _floor(v: float) -> int:
    return int(math.floor(_snap(v)))


def _ceil(v: float) -> int:
    return int(math.ceil(_snap(v)))


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    boxes: tuple[BoundingBox, ...] = ()

    def __post_init__(self):
        if not self.image_id:
            raise SchemaError("image_id must be non-empty")
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class DistanceEstimate:
    image_id: str
    box_index: int
    distance_m: float
    percentile_used: float
    pixels_sampled: int
    invalid_pixel_fraction: float
    flags: frozenset = field(default_factory=frozenset)
    box: Optional[BoundingBox] = None
    transect_id: str = ""

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.transect_id, self.image_id, self.box_index)


def build_exclusion_mask(detections: DetectionSet, width: int, height: int) -> np.ndarray:
    """Boolean (height, width) mask set inside any detection box."""
    mask = np.zeros((height, width), dtype=bool)
    for box in detections.boxes:
        u0, v0, u1, v1 = box.pixel_bounds(width, height)
        mask[v0:v1, u0:u1] = True
    return mask


def align_observation(
    d_obs,
    m_obs,
    cal: TransectCalibration,
    cfg: Optional[RansacConfig] = None,
    max_fit_pixels: int = MAX_FIT_PIXELS,
) -> tuple[np.ndarray, AffineFit]:
    """Map an observation disparity onto the calibrated target scale.

    The fit regresses calibrated target disparity on observation disparity
    over pixels that are neither the target landmark nor inside a detection,
    so that pixels on the animals (absent from the reference) receive
    calibrated values too.

    Raises:
        NoConsensus: too little scene evidence, or the best model has low
            consensus (``exc.fit`` then holds it).
    """
    cfg = cfg or RansacConfig()
    d_obs = as_disparity(d_obs)
    if d_obs.shape != cal.shape:
        raise DimensionMismatch(
            f"observation shape {d_obs.shape} does not match calibration {cal.shape}"
        )
    m_obs = as_mask(m_obs, d_obs.shape)
    exclude = m_obs | cal.target_mask
    usable = int(exclude.size - np.count_nonzero(exclude))
    if usable < max(2, MIN_SCENE_FRACTION * exclude.size):
        raise NoConsensus(f"only {usable} scene pixels left for alignment")
    x, y = scene_pixel_pairs(d_obs, cal.target_disparity_calibrated, exclude, max_fit_pixels, cfg.seed)
    fit = fit_affine(x, y, cfg)
    return evaluate_affine(fit, d_obs), fit


def sample_distance(
    depth,
    valid,
    box: BoundingBox,
    percentile: float = DEFAULT_PERCENTILE,
    *,
    image_id: str = "",
    box_index: int = 0,
) -> DistanceEstimate:
    """Linearly interpolated depth percentile inside ``box``.

    Invalid (capped) pixels stay in the sample at their capped depth and are
    reported through ``invalid_pixel_fraction``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    height, width = depth.shape
    u0, v0, u1, v1 = box.pixel_bounds(width, height)
    if u1 <= u0 or v1 <= v0:
        raise EmptyBox(f"box {box} covers no pixels in a {width}x{height} image")
    vals = np.sort(depth[v0:v1, u0:u1], axis=None)
    n = vals.size
    invalid = 1.0 - float(np.count_nonzero(np.asarray(valid)[v0:v1, u0:u1])) / n
    flags = set()
    if invalid > CAPPED_FRACTION:
        flags.add(FLAG_CAPPED)
    if n < TINY_BOX_PIXELS:
        flags.add(FLAG_TINY)
    return DistanceEstimate(
        image_id=image_id,
        box_index=box_index,
        distance_m=linear_percentile(vals, percentile),
        percentile_used=float(percentile),
        pixels_sampled=n,
        invalid_pixel_fraction=invalid,
        flags=frozenset(flags),
        box=box,
    )


def estimate_observation(
    d_obs,
    detections: DetectionSet,
    cal: TransectCalibration,
    cfg: Optional[RansacConfig] = None,
    *,
    percentile: float = DEFAULT_PERCENTILE,
    confidence: float = DEFAULT_CONFIDENCE,
    categories: Iterable[str] = ("animal",),
    max_fit_pixels: int = MAX_FIT_PIXELS,
    disparity_floor: float = DISPARITY_FLOOR,
    transect_id: str = "",
) -> list[DistanceEstimate]:
    """One distance per retained detection of a single observation.

    Every detection, whatever its category or confidence, is excluded from
    the alignment; distances are reported only for boxes of the requested
    categories at or above ``confidence``. ``box_index`` refers to the
    position in ``detections.boxes``.

    A low-consensus alignment does not raise: its estimates carry the
    ``alignment_low_inliers`` flag. Missing scene evidence still raises
    :class:`NoConsensus`.
    """
    categories = set(categories)
    keep = [
        (i, b) for i, b in enumerate(detections.boxes)
        if b.category in categories and b.confidence >= confidence
    ]
    if not keep:
        return []
    d_obs = as_disparity(d_obs)
    height, width = d_obs.shape
    m_obs = build_exclusion_mask(detections, width, height)
    extra = set()
    try:
        calibrated, _ = align_observation(d_obs, m_obs, cal, cfg, max_fit_pixels)
    except NoConsensus as exc:
        if exc.fit is None:
            raise
        logger.warning("%s: low alignment consensus (%.3f)", detections.image_id, exc.fit.inlier_fraction)
        calibrated = evaluate_affine(exc.fit, d_obs)
        extra.add(FLAG_LOW_INLIERS)
    depth, valid = disparity_to_depth(calibrated, disparity_floor)
    out = []
    for i, box in keep:
        est = sample_distance(depth, valid, box, percentile, image_id=detections.image_id, box_index=i)
        out.append(
            DistanceEstimate(
                image_id=est.image_id,
                box_index=est.box_index,
                distance_m=est.distance_m,
                percentile_used=est.percentile_used,
                pixels_sampled=est.pixels_sampled,
                invalid_pixel_fraction=est.invalid_pixel_fraction,
                flags=est.flags | extra,
                box=box,
                transect_id=transect_id,
            )
        )
    return out


def sort_estimates(estimates: Sequence[DistanceEstimate]) -> list[DistanceEstimate]:
    return sorted(estimates, key=lambda e: e.key)
