import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from interhom.errors import DegenerateParameterError, DomainError, InvalidInputError
from interhom.limit import (GluingTestFunction, LimitScheme, compare_laws, ks_threshold,
                            make_gluing_test_function, simulate_limit, simulate_limit_path,
                            simulate_skew_first, skew_exit_probability, verify_martingale_problem)
from interhom.sde import PathEstimate, simulate_terminal
from interhom.strip import InterfaceParams, params_from_values

SQRT_2_PI = math.sqrt(2 / math.pi)


def standard(dim=1, p=0.5, alpha=None):
    alpha = [0.0] * (dim - 1) if alpha is None else alpha
    return params_from_values(p, np.eye(dim), np.eye(dim), alpha)


@pytest.fixture(scope="module")
def bm_sample():
    return simulate_limit(standard(), 0.01, 1.0, 10_000, seed=21)


def test_standard_case_is_brownian(bm_sample):
    x = np.abs(bm_sample.x_T[:, 0])
    assert PathEstimate.from_samples(x, 0, "abs").within(SQRT_2_PI)
    assert PathEstimate.from_samples(bm_sample.local_time, 0, "L").within(SQRT_2_PI)


def test_quadratic_variation(bm_sample):
    f = make_gluing_test_function(standard(), H_minus=np.eye(1))
    assert f.g_plus[0] == 0.0 and f.H_plus[0, 0] == 1.0
    assert verify_martingale_problem(bm_sample, f, standard()).within(0.0)


def test_uncoupled_limit_covariance():
    s = simulate_limit(standard(2), 0.02, 1.0, 20_000, seed=3, min_steps=1)
    x = s.x_T
    cov = np.cov(x.T)
    n = x.shape[0]
    se = math.sqrt(2 / n)
    assert abs(cov[0, 0] - 1) < 3 * se and abs(cov[1, 1] - 1) < 3 * se
    assert abs(cov[0, 1]) < 3 / math.sqrt(n)


def test_tangential_drift_follows_local_time():
    for a in (0.5, -0.5):
        s = simulate_limit(standard(2, alpha=[a]), 0.02, 1.0, 10_000, seed=8, min_steps=1)
        assert PathEstimate.from_samples(s.x_T[:, 1], 0, "x2").within(a * SQRT_2_PI)


def test_skew_step_carries_normal_drift():
    P = standard(p=0.75)
    s = simulate_limit(P, 0.02, 1.0, 10_000, seed=5, min_steps=1)
    resid = s.x_T[:, 0] - P.K[0] * s.local_time
    assert PathEstimate.from_samples(resid, 0, "k1").within(0.0)
    # and the first coordinate is really biased upwards
    assert s.x_T[:, 0].mean() > 10 * resid.std() / math.sqrt(resid.size)


@pytest.mark.parametrize("D_plus", [1.0, 4.0])
def test_skew_exit_probability(D_plus):
    P = params_from_values(0.75, [[D_plus]], [[1.0]])
    est = skew_exit_probability(P, 0.1, h=0.01, n_paths=10_000, seed=2)
    assert est.within(0.75)


def test_local_time_is_monotone_and_grows_only_at_zero():
    P = params_from_values(0.6, [[2.0]], [[0.5]])
    t, x1, L = simulate_skew_first(P, 0.02, 1.0, seed=1, stride=1, min_steps=1)
    dL = np.diff(L)
    assert np.all(dL >= 0)
    assert np.all(x1[:-1][dL > 0] == 0.0)
    assert np.all(np.isin(np.round(dL[dL > 0] / (0.02 / P.skew_scale), 12), [1.0]))
    assert t[-1] == pytest.approx(1.0)


def test_limit_path_records():
    P = standard(2, alpha=[0.3])
    a = simulate_limit_path(P, 0.02, 1.0, seed=4, stride=10, index=2, min_steps=1)
    b = simulate_limit_path(P, 0.02, 1.0, seed=4, stride=10, index=2, min_steps=1)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.x.shape == (251, 2)
    assert np.all(np.diff(a.t) > 0)


@pytest.mark.parametrize("p, alpha, g_minus, expected", [
    (2 / 3, [], [1.0], 0.5),
    (0.5, [1.0], [0.0, 1.0], -2.0),
    (0.5, [0.0], [0.0, 0.7], 0.0),
])
def test_gluing_slope_examples(p, alpha, g_minus, expected):
    d = len(g_minus)
    P = params_from_values(p, np.eye(d), np.eye(d), alpha)
    f = make_gluing_test_function(P, g_minus=g_minus)
    assert f.g_plus[0] == pytest.approx(expected, abs=1e-15)
    assert f.gluing_residual(P) <= 1e-10 and f.continuity_residual() == 0.0


@given(st.floats(0.05, 0.95), st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1), st.floats(-1, 1))
def test_gluing_identity_holds(p, a, g1, h11, h12):
    P = params_from_values(p, [[2.0, 0.1], [0.1, 1.0]], [[0.5, 0.0], [0.0, 1.5]], [a])
    f = make_gluing_test_function(P, 0.3, [g1, 0.5], [[h11, h12], [h12, 0.2]], h_plus_11=-h11)
    assert f.gluing_residual(P) <= 1e-10
    for xt in (-1.0, 0.0, 2.5):
        dp, dm = f.normal_derivatives([xt])
        assert p * dp - (1 - p) * dm + a * f.tangential_gradient([xt])[0] == \
            pytest.approx(0.0, abs=1e-12)
        # continuous across the interface
        assert f([[1e-300, xt]])[0] == pytest.approx(f([[0.0, xt]])[0], abs=1e-12)


def test_martingale_defects_vanish_in_domain():
    P = params_from_values(0.65, [[1.5, 0.2], [0.2, 1.0]], [[0.7, 0.0], [0.0, 1.2]], [0.4])
    s = simulate_limit(P, 0.01, 1.0, 10_000, seed=12)
    fs = [make_gluing_test_function(P, 0.0, [1.0, 0.5]),
          make_gluing_test_function(P, 0.0, None, np.diag([1.0, 0.0]), h_plus_11=2.0),
          make_gluing_test_function(P, 0.0, [-0.5, -0.25], [[1.0, 0.25], [0.25, 1.0]], -1.0)]
    for f in fs:
        assert verify_martingale_problem(s, f, P).within(0.0)


def test_negative_control_detects_gluing_violation():
    P = standard(p=0.75)
    s = simulate_limit(P, 0.01, 1.0, 10_000, seed=13)
    good = make_gluing_test_function(P, 0.0, [1.0])
    r = 0.5
    bad = GluingTestFunction(0.0, good.g_plus + r / P.p_plus, good.g_minus, good.H_plus,
                             good.H_minus)
    with pytest.raises(DomainError):
        verify_martingale_problem(s, bad, P)
    e = verify_martingale_problem(s, bad, P, allow_violation=True)
    assert abs(e.value) > 3 * e.stderr
    # the defect is the gluing residual times the local time
    assert e.within(r * s.local_time.mean(), 3.0, other_stderr=r * s.local_time.std() /
                    math.sqrt(s.local_time.size))


def test_degenerate_and_bad_schemes():
    P = standard()
    bad = InterfaceParams(1.0, 0.0, np.zeros(0), np.eye(1), np.eye(1), np.eye(1), np.eye(1),
                          np.array([1.0]))
    with pytest.raises(DegenerateParameterError):
        make_gluing_test_function(bad)
    with pytest.raises(DegenerateParameterError):
        LimitScheme(bad)
    with pytest.raises(InvalidInputError):
        LimitScheme(P, h=0.03, T=1.0)
    with pytest.raises(InvalidInputError):
        LimitScheme(P, h=0.1, T=1.0)
    with pytest.raises(InvalidInputError):
        make_gluing_test_function(P, H_minus=[[1.0, 2.0], [0.0, 1.0]])


def test_scheme_description_reduces_to_plain_walk():
    d = LimitScheme(standard(p=0.7)).describe()
    assert d["beta_plus"] == pytest.approx(0.7)
    assert d["local_time_step"] == pytest.approx(0.01)
    assert d["steps"] == 10_000


def ecdf_distance(a, b):
    grid = np.concatenate([a, b])
    fa = np.searchsorted(np.sort(a), grid, side="right") / a.size
    fb = np.searchsorted(np.sort(b), grid, side="right") / b.size
    return np.max(np.abs(fa - fb))


def test_ks_statistic_and_threshold():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2))
    res = compare_laws(a, b)
    assert res.statistics[0] == pytest.approx(ecdf_distance(a[:, 0], b[:, 0]))
    assert res.passed
    # asymptotic 1% critical value sqrt(-log(0.005) / 2) sqrt((n + m) / (n m))
    assert ks_threshold(2000, 2000) == pytest.approx(
        math.sqrt(-math.log(0.005) / 2) * math.sqrt(2 / 2000), rel=1e-3)
    shifted = compare_laws(a, b + 0.3)
    assert not shifted.passed


def test_same_limit_law_different_seeds():
    P = params_from_values(0.7, [[2.0]], [[0.5]])
    a = simulate_limit(P, 0.02, 1.0, 4000, seed=1, min_steps=1).x_T
    b = simulate_limit(P, 0.02, 1.0, 4000, seed=2, min_steps=1).x_T
    assert compare_laws(a, b).passed


def test_brownian_micro_vs_limit():
    micro = 0.1 * simulate_terminal(None, [0.0, 0.0], 1.0, 100.0, 2000, seed=6)
    limit = simulate_limit(standard(2), 0.02, 1.0, 2000, seed=6, min_steps=1).x_T
    assert compare_laws(micro, limit).passed


def test_compare_laws_input_checks():
    with pytest.raises(InvalidInputError):
        compare_laws(np.zeros((1000, 1)), np.zeros((1200, 1)))
    with pytest.raises(InvalidInputError):
        compare_laws(np.zeros((10, 1)), np.zeros((10, 1)))


@pytest.mark.slow
def test_ks_distance_to_limit_does_not_grow_as_epsilon_shrinks(oracle_1d):
    from interhom.strip import params_from_values as pv
    import oracles
    o = oracles.SineInterface1D(0.3, 0.5, 0.5)
    dp, dm = o.D()
    P = pv(o.p_plus(), [[dp]], [[dm]])
    n = 4000
    limit = simulate_limit(P, 0.01, 1.0, n, seed=30).x_T
    dist = {}
    for eps in (0.1, 0.05):
        T = 1.0 / eps ** 2
        micro = eps * simulate_terminal(oracle_1d, [0.0], 1e-2, T, n, seed=31)
        dist[eps] = compare_laws(micro, limit).max_statistic
    # non-increasing up to the sampling noise of the statistic
    assert dist[0.05] <= dist[0.1] + 0.5 * ks_threshold(n, n)
