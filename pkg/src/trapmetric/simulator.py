"""Synthetic transects with known geometry, used as an end-to-end oracle.

The camera looks horizontally over a flat ground plane. A pixel row ``v``
below the horizon sees ground at depth ``f*h / (v - horizon)``; everything at
or above the horizon is background at a fixed depth. Landmarks and animals
are fronto-parallel rectangles standing on the ground at their distance.
Emitted disparity is ``a/Z + b`` plus optional Gaussian noise, mimicking a
monocular depth network's unknown affine gauge.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from trapmetric.calibration import ReferenceSample
from trapmetric.errors import SpecError
from trapmetric.estimation import BoundingBox, DetectionSet


@dataclass(frozen=True)
class AnimalPlacement:
    distance_m: float
    column: float  # horizontal center, pixels
    width_m: float = 0.9
    height_m: float = 0.6


@dataclass(frozen=True)
class SceneSpec:
    # bottom row sees ground at ~1 m, the nearest usual landmark distance
    width: int = 640
    height: int = 480
    focal_px: float = 360.0
    camera_height_m: float = 1.0
    horizon_row: int = 120
    landmark_distances: tuple = (3.0, 15.0)
    landmark_width_m: float = 0.5
    landmark_height_m: float = 1.7
    animals: tuple = ()
    extra_observations: tuple = ()
    distortion_scale: float = 1.0
    distortion_shift: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    background_depth_m: float = 50.0

    @property
    def observations(self) -> tuple:
        return (tuple(self.animals),) + tuple(tuple(o) for o in self.extra_observations)

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise SpecError("image dimensions must be positive")
        if not 0 <= self.horizon_row < self.height - 1:
            raise SpecError(f"horizon row {self.horizon_row} must lie inside the image above the last row")
        if self.focal_px <= 0 or self.camera_height_m <= 0:
            raise SpecError("focal length and camera height must be positive")
        if not self.distortion_scale > 0:
            raise SpecError("distortion scale must be > 0")
        if self.noise_sigma < 0:
            raise SpecError("noise sigma must be >= 0")
        if self.background_depth_m <= 0:
            raise SpecError("background depth must be positive")
        dist = list(self.landmark_distances)
        if any(not z > 0 for z in dist):
            raise SpecError("landmark distances must be positive")
        if len(set(dist)) != len(dist):
            raise SpecError("landmark distances must be distinct")
        for animals in self.observations:
            for a in animals:
                if not a.distance_m > 0:
                    raise SpecError("animal distances must be positive")


@dataclass
class SyntheticObservation:
    image_id: str
    true_depth: np.ndarray
    disparity: np.ndarray
    detections: DetectionSet
    ground_truth_m: list


@dataclass
class SyntheticScene:
    spec: SceneSpec
    reference_background: np.ndarray
    observation_background: np.ndarray
    references: list
    reference_depths: list
    observations: list = field(default_factory=list)

    # single-observation conveniences
    @property
    def true_depth(self) -> np.ndarray:
        return self.observations[0].true_depth

    @property
    def observation_disparity(self) -> np.ndarray:
        return self.observations[0].disparity

    @property
    def detections(self) -> DetectionSet:
        return self.observations[0].detections

    @property
    def ground_truth_m(self) -> list:
        return self.observations[0].ground_truth_m


def ground_plane_depth(spec: SceneSpec) -> np.ndarray:
    rows = np.arange(spec.height, dtype=np.float64)
    below = rows > spec.horizon_row
    z = np.full(spec.height, float(spec.background_depth_m))
    z[below] = spec.focal_px * spec.camera_height_m / (rows[below] - spec.horizon_row)
    return np.repeat(z[:, None], spec.width, axis=1)


def object_rect(spec: SceneSpec, distance_m, column, width_m, height_m):
    """Pixel rectangle ``(u0, v0, u1, v1)`` of an upright object on the ground."""
    foot = spec.horizon_row + spec.focal_px * spec.camera_height_m / distance_m
    h_px = spec.focal_px * height_m / distance_m
    w_px = max(1.0, spec.focal_px * width_m / distance_m)
    v1 = min(spec.height, int(round(foot)))
    v0 = max(0, min(v1 - 1, int(round(foot - h_px))))
    u0 = max(0, int(round(column - w_px / 2)))
    u1 = min(spec.width, max(u0 + 1, int(round(column + w_px / 2))))
    if v1 <= 0 or u0 >= spec.width or v0 >= v1:
        raise SpecError(f"object at {distance_m} m, column {column} is outside the image")
    return u0, v0, u1, v1


def _landmark_columns(spec: SceneSpec) -> list:
    n = len(spec.landmark_distances)
    return [spec.width * (i + 1) / (n + 1) for i in range(n)]


def _emit(spec: SceneSpec, depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    d = spec.distortion_scale / depth + spec.distortion_shift
    if spec.noise_sigma > 0:
        d = d + rng.normal(0.0, spec.noise_sigma, size=d.shape)
    return d


def _stream(spec: SceneSpec, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(kind, index)))


def _render_observation(spec, background, animals, index) -> SyntheticObservation:
    depth = background.copy()
    boxes, gts, rects = [], [], []
    for a in animals:
        u0, v0, u1, v1 = object_rect(spec, a.distance_m, a.column, a.width_m, a.height_m)
        for r in rects:
            if u0 < r[2] and r[0] < u1 and v0 < r[3] and r[1] < v1:
                raise SpecError(f"animals overlap in observation {index}")
        rects.append((u0, v0, u1, v1))
        depth[v0:v1, u0:u1] = a.distance_m
        boxes.append(
            BoundingBox(
                x=u0 / spec.width, y=v0 / spec.height,
                w=(u1 - u0) / spec.width, h=(v1 - v0) / spec.height,
                confidence=0.95, category="animal",
            )
        )
        gts.append(float(a.distance_m))
    image_id = f"obs_{index:04d}"
    disparity = _emit(spec, depth, _stream(spec, 1, index))
    return SyntheticObservation(image_id, depth, disparity, DetectionSet(image_id, tuple(boxes)), gts)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Render references and observations for ``spec``; bit-identical per seed."""
    spec.validate()
    background = ground_plane_depth(spec)
    refs, ref_depths = [], []
    for i, (z, col) in enumerate(zip(spec.landmark_distances, _landmark_columns(spec))):
        u0, v0, u1, v1 = object_rect(spec, z, col, spec.landmark_width_m, spec.landmark_height_m)
        depth = background.copy()
        depth[v0:v1, u0:u1] = z
        mask = np.zeros(depth.shape, dtype=bool)
        mask[v0:v1, u0:u1] = True
        refs.append(
            ReferenceSample(_emit(spec, depth, _stream(spec, 0, i)), mask, float(z), name=f"ref_{i:02d}")
        )
        ref_depths.append(depth)
    scene = SyntheticScene(spec, background, background, refs, ref_depths)
    scene.observations = [
        _render_observation(spec, background, animals, k) for k, animals in enumerate(spec.observations)
    ]
    return scene


def perturb_scene(scene: SyntheticScene, fraction: float, seed: int = 0) -> SyntheticScene:
    """Re-depth ``fraction`` of background pixels at observation time.

    Picked pixels move closer by a random factor in [0.2, 0.8], as if
    vegetation grew between the reference and observation captures.
    References are untouched; observations are re-rendered with their
    original noise streams.
    """
    if not 0 <= fraction <= 0.5:
        raise ValueError(f"perturbation fraction must be in [0, 0.5], got {fraction}")
    rng = np.random.default_rng(seed)
    background = scene.reference_background.copy()
    k = int(round(fraction * background.size))
    if k:
        idx = rng.choice(background.size, size=k, replace=False)
        flat = background.reshape(-1)
        flat[idx] *= rng.uniform(0.2, 0.8, size=k)
    spec = scene.spec
    out = replace(scene, observation_background=background, observations=[])
    out.observations = [
        _render_observation(spec, background, animals, i) for i, animals in enumerate(spec.observations)
    ]
    return out


def disparity_range(scene: SyntheticScene) -> float:
    """Noise-free emitted disparity range of the target (farthest) reference."""
    t = int(np.argmax(scene.spec.landmark_distances))
    d = scene.spec.distortion_scale / scene.reference_depths[t]
    return float(d.max() - d.min())


def spread_animals(
    distances: Sequence[float], spec: SceneSpec, per_observation: int = 4
) -> list:
    """Lay out animals left to right, ``per_observation`` to a frame."""
    groups = []
    for start in range(0, len(distances), per_observation):
        chunk = distances[start:start + per_observation]
        cols = [spec.width * (j + 0.5) / per_observation for j in range(len(chunk))]
        groups.append(tuple(AnimalPlacement(float(z), float(c)) for z, c in zip(chunk, cols)))
    return groups


def spec_from_dict(d: dict) -> SceneSpec:
    """Build a spec from plain JSON-style values."""
    d = dict(d)
    obs = d.pop("observations", None)
    for key in ("transect_id",):
        d.pop(key, None)
    if "landmark_distances" in d:
        d["landmark_distances"] = tuple(float(z) for z in d["landmark_distances"])
    animals = [tuple(AnimalPlacement(**a) for a in o) for o in (obs or [])]
    if animals:
        d["animals"] = animals[0]
        d["extra_observations"] = tuple(animals[1:])
    try:
        return SceneSpec(**d)
    except TypeError as exc:
        raise SpecError(str(exc)) from exc
