import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_l1, grid_l1
from trapmetric.errors import DegenerateInput, NoConsensus
from trapmetric.robustfit import (
    AffineFit,
    RansacConfig,
    evaluate_affine,
    fit_affine,
    fit_affine_with_inliers,
    l1_objective,
    mad_threshold,
)


def line_with_outliers(seed=3, n_in=70, n_out=30, noise=0.0):
    rng = np.random.default_rng(seed)
    x_in = rng.uniform(0.0, 2.0, n_in)
    y_in = 0.5 * x_in - 0.05 + rng.normal(0.0, noise, n_in) * (noise > 0)
    x_out = rng.uniform(0.0, 2.0, n_out)
    y_out = rng.uniform(y_in.min(), y_in.max(), n_out)
    return np.r_[x_in, x_out], np.r_[y_in, y_out], n_in


def test_exact_line():
    x = np.arange(5.0)
    fit = fit_affine(x, 2 * x + 1)
    assert fit.m == pytest.approx(2.0, abs=1e-12)
    assert fit.c == pytest.approx(1.0, abs=1e-12)
    assert fit.inlier_fraction == 1.0
    assert fit.residual_l1 == pytest.approx(0.0, abs=1e-12)


def test_accepts_pairs():
    fit = fit_affine([(0, 1), (1, 3), (2, 5)])
    assert (fit.m, fit.c) == pytest.approx((2.0, 1.0))


def test_outliers_exact_inliers():
    x, y, n_in = line_with_outliers()
    fit = fit_affine(x, y)
    _, m_ex, c_ex = exhaustive_l1(x[:n_in], y[:n_in])
    m_grid, c_grid = grid_l1(x[:n_in], y[:n_in], (0.3, 0.7), (-0.2, 0.1))
    assert abs(m_ex - 0.5) < 1e-9 and abs(c_ex + 0.05) < 1e-9
    assert abs(m_grid - 0.5) < 1e-4 and abs(c_grid + 0.05) < 1e-4
    assert abs(fit.m - 0.5) < 1e-3
    assert abs(fit.c + 0.05) < 1e-3


def test_outliers_noisy_inliers_match_l1_oracles():
    # the default MAD-of-y threshold admits most in-range outliers; a tight
    # explicit threshold keeps the consensus set close to the true inliers
    x, y, n_in = line_with_outliers(seed=11, noise=0.002)
    fit = fit_affine(x, y, RansacConfig(inlier_threshold=0.01))
    _, m_ex, c_ex = exhaustive_l1(x[:n_in], y[:n_in])
    m_grid, c_grid = grid_l1(x[:n_in], y[:n_in], (0.3, 0.7), (-0.2, 0.1))
    assert abs(m_ex - m_grid) < 1e-3 and abs(c_ex - c_grid) < 1e-3
    assert abs(fit.m - m_ex) < 1e-3 and abs(fit.c - c_ex) < 1e-3
    assert abs(fit.m - 0.5) < 1e-3 and abs(fit.c + 0.05) < 1e-3


def test_vertical_data_is_degenerate():
    with pytest.raises(DegenerateInput):
        fit_affine([(1, 1), (1, 2)])


def test_single_sample_is_degenerate():
    with pytest.raises(DegenerateInput):
        fit_affine([0.0], [1.0])


def test_low_consensus_raises_with_best_fit():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 40)
    y = rng.uniform(0, 1, 40)
    cfg = RansacConfig(inlier_threshold=1e-4, min_inlier_fraction=0.9)
    with pytest.raises(NoConsensus) as info:
        fit_affine(x, y, cfg)
    assert isinstance(info.value.fit, AffineFit)


@pytest.mark.parametrize(
    "kwargs",
    [dict(iterations=0), dict(inlier_threshold=0.0), dict(min_inlier_fraction=0.0),
     dict(min_inlier_fraction=1.5), dict(refit_iterations=-1)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        RansacConfig(**kwargs)


def test_evaluate_affine_examples():
    assert evaluate_affine(AffineFit(1.0, 0.0, 2, 1.0, 0.0), 0.25) == 0.25
    got = evaluate_affine(AffineFit(0.5, -0.05, 2, 1.0, 0.0), 2 / 3 + 0.1)
    assert got == pytest.approx(1 / 3, abs=1e-12)
    assert evaluate_affine(AffineFit(2.0, 1.0, 2, 1.0, 0.0), -0.5) == 0.0


def test_mad_threshold_fallbacks():
    assert mad_threshold(np.array([0.0, 1.0, 2.0, 3.0, 4.0])) == pytest.approx(1.25)
    # MAD zero, mean absolute deviation positive
    assert mad_threshold(np.array([1.0, 1.0, 1.0, 5.0])) > 0
    assert mad_threshold(np.zeros(4)) > 0


def test_fit_dict_round_trip():
    fit = fit_affine(np.arange(6.0), 3 * np.arange(6.0) - 2)
    assert AffineFit.from_dict(fit.to_dict()) == fit


def test_inlier_mask_matches_count():
    x, y, _ = line_with_outliers()
    fit, inliers = fit_affine_with_inliers(x, y)
    assert inliers.sum() == fit.inlier_count
    assert fit.inlier_fraction == fit.inlier_count / x.size


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def noisy_problem(draw):
    n = draw(st.integers(6, 30))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, n)
    y = draw(finite) * x + draw(finite) + rng.normal(0, 0.05, n)
    k = draw(st.integers(0, n // 3))
    y[:k] += rng.uniform(-20, 20, k)
    return x, y


@settings(max_examples=40, deadline=None)
@given(noisy_problem(), st.integers(0, 2**63 - 1))
def test_determinism(problem, seed):
    x, y = problem
    cfg = RansacConfig(seed=seed, min_inlier_fraction=0.01)
    assert fit_affine(x, y, cfg) == fit_affine(x.copy(), y.copy(), cfg)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=40, unique=True),
    st.floats(-5, 5, allow_nan=False).filter(lambda v: abs(v) > 1e-3),
    st.floats(-5, 5, allow_nan=False),
)
def test_outlier_free_equivalence(xs, m, c):
    x = np.array(xs)
    if np.ptp(x) < 1e-3:
        return
    fit = fit_affine(x, m * x + c)
    assert fit.inlier_fraction == 1.0
    scale = 1 + abs(m) * np.abs(x).max() + abs(c)
    assert fit.residual_l1 <= 1e-9 * scale
    assert fit.m == pytest.approx(m, rel=1e-9, abs=1e-9)
    assert fit.c == pytest.approx(c, rel=1e-9, abs=1e-9 * scale)


@settings(max_examples=40, deadline=None)
@given(noisy_problem(), st.floats(-6, 6, allow_nan=False))
def test_consensus_monotonicity(problem, x_new):
    x, y = problem
    cfg = RansacConfig(min_inlier_fraction=0.01, inlier_threshold=0.2)
    fit = fit_affine(x, y, cfg)
    more = fit_affine(np.r_[x, x_new], np.r_[y, fit.m * x_new + fit.c], cfg)
    assert more.inlier_count >= fit.inlier_count


@settings(max_examples=40, deadline=None)
@given(noisy_problem(), st.sampled_from([0.25, 2.0, 8.0]))
def test_scale_equivariance(problem, k):
    # powers of two keep the scaled arithmetic exact
    x, y = problem
    cfg = RansacConfig(min_inlier_fraction=0.01, inlier_threshold=0.2)
    cfg_k = RansacConfig(min_inlier_fraction=0.01, inlier_threshold=0.2 * k)
    a = fit_affine(x, y, cfg)
    b = fit_affine(x, k * y, cfg_k)
    assert b.m == pytest.approx(k * a.m, rel=1e-9, abs=1e-12)
    assert b.c == pytest.approx(k * a.c, rel=1e-9, abs=1e-12)
    assert b.inlier_count == a.inlier_count


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 12), st.integers(0, 3))
def test_oracle_equivalence_on_consensus(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, n)
    y = 1.7 * x + 0.3 + rng.normal(0, 0.01, n)
    y[:k] += rng.choice([-1, 1], k) * rng.uniform(0.5, 2.0, k)
    fit, inl = fit_affine_with_inliers(x, y, RansacConfig(min_inlier_fraction=0.01))
    best, _, _ = exhaustive_l1(x[inl], y[inl])
    got = l1_objective(x[inl], y[inl], fit.m, fit.c)
    assert got <= best * 1.01 + 1e-12
