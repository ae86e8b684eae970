"""Metric camera-to-animal distances from camera-trap disparity maps."""

from trapmetric.calibration import (
    ReferenceSample,
    TransectCalibration,
    calibrate_transect,
    disparity_to_depth,
)
from trapmetric.estimation import (
    BoundingBox,
    DetectionSet,
    DistanceEstimate,
    estimate_observation,
)
from trapmetric.robustfit import AffineFit, RansacConfig, evaluate_affine, fit_affine

__version__ = "0.1.0"

__all__ = [
    "AffineFit",
    "BoundingBox",
    "DetectionSet",
    "DistanceEstimate",
    "RansacConfig",
    "ReferenceSample",
    "TransectCalibration",
    "calibrate_transect",
    "disparity_to_depth",
    "estimate_observation",
    "evaluate_affine",
    "fit_affine",
]
