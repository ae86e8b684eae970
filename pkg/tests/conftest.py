import numpy as np
import pytest

from trapmetric.calibration import ReferenceSample

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one pass/fail line per acceptance criterion."""

    def record(tag: str, ok: bool, detail: str) -> None:
        line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def scene_raster(shape=(40, 60), seed=0):
    """Smooth-ish positive disparity field standing in for a static scene."""
    rng = np.random.default_rng(seed)
    rows = np.linspace(0.05, 0.9, shape[0])[:, None]
    return rows + 0.05 * rng.random(shape)


def box_mask(shape, v0, v1, u0, u1):
    m = np.zeros(shape, dtype=bool)
    m[v0:v1, u0:u1] = True
    return m


@pytest.fixture
def two_landmark_refs():
    """Identical scenes; landmark regions hold 2/z + 0.1 for z = 3 m and 15 m."""
    scene = scene_raster()
    refs = []
    for z, (u0, u1) in ((3.0, (5, 15)), (15.0, (40, 48))):
        d = scene.copy()
        mask = box_mask(d.shape, 10, 30, u0, u1)
        d[mask] = 2.0 / z + 0.1
        refs.append(ReferenceSample(d, mask, z, name=f"ref_{int(z)}m"))
    return refs
