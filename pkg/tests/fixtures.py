"""Synthetic transect trees for the pipeline tests."""

from dataclasses import replace
from pathlib import Path

import numpy as np

from trapmetric import io
from trapmetric.pipeline import write_transect
from trapmetric.simulator import AnimalPlacement, SceneSpec, generate_scene

SMALL = SceneSpec(width=160, height=120, focal_px=90.0, horizon_row=30, landmark_distances=(3.0, 15.0))


def synthetic_transect(root, tid, n_obs=3, seed=0, distances=None, **spec_kw):
    """One animal per observation at a seeded distance in [2.5, 12] m."""
    rng = np.random.default_rng(seed)
    zs = distances if distances is not None else rng.uniform(2.5, 12.0, n_obs)
    obs = [(AnimalPlacement(float(z), 80.0),) for z in zs]
    spec = replace(SMALL, animals=obs[0] if obs else (), extra_observations=tuple(obs[1:]), seed=seed, **spec_kw)
    scene = generate_scene(spec)
    if not obs:
        scene.observations = []
    return write_transect(scene, root, tid)


def make_planar(root, tid, seed=0):
    """A transect whose landmarks all show the same disparity."""
    tdir = synthetic_transect(root, tid, n_obs=1, seed=seed)
    for rec in io.load_reference_csv(tdir / "references.csv"):
        path = tdir / "references" / rec.disparity
        d = io.load_disparity(path)
        d[io.load_mask(tdir / "references" / rec.mask)] = 0.05
        io.write_disparity(path, d)
    return tdir


def tree_bytes(root) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
