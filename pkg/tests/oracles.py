"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def exhaustive_l1(x, y):
    """Exact L1 line fit: the optimum interpolates some pair of samples."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    best = (np.inf, None, None)
    for i, j in itertools.combinations(range(x.size), 2):
        if x[i] == x[j]:
            continue
        m = (y[j] - y[i]) / (x[j] - x[i])
        c = y[i] - m * x[i]
        obj = float(np.sum(np.abs(m * x + c - y)))
        if obj < best[0]:
            best = (obj, m, c)
    return best


def grid_l1(x, y, m_range, c_range, steps=201, rounds=4):
    """Coarse-to-fine grid minimization of the L1 objective over (m, c)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    (m_lo, m_hi), (c_lo, c_hi) = m_range, c_range
    for _ in range(rounds):
        ms = np.linspace(m_lo, m_hi, steps)
        cs = np.linspace(c_lo, c_hi, steps)
        obj = np.abs(ms[:, None, None] * x[None, None, :] + cs[None, :, None] - y).sum(axis=2)
        i, j = np.unravel_index(np.argmin(obj), obj.shape)
        dm, dc = (m_hi - m_lo) / (steps - 1), (c_hi - c_lo) / (steps - 1)
        m_lo, m_hi = ms[i] - 2 * dm, ms[i] + 2 * dm
        c_lo, c_hi = cs[j] - 2 * dc, cs[j] + 2 * dc
    return float(ms[i]), float(cs[j])


def sort_interpolate(values, p):
    v = sorted(float(a) for a in values)
    r = p / 100 * (len(v) - 1)
    lo = int(r)
    if lo + 1 >= len(v):
        return v[lo]
    return v[lo] + (r - lo) * (v[lo + 1] - v[lo])


def box_union_count(boxes, width, height):
    """Per-pixel point-in-box test, boxes given as pixel windows (u0, v0, u1, v1)."""
    n = 0
    for v in range(height):
        for u in range(width):
            if any(u0 <= u < u1 and v0 <= v < v1 for u0, v0, u1, v1 in boxes):
                n += 1
    return n
