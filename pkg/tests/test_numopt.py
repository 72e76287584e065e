import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalbb import numopt
from causalbb.errors import (DivergedStepError, MaxIterationsError,
                             SeparationError, SingularDesignError)
from causalbb.streams import generator

import oracles


# ---------------------------------------------------------------------------
# Dirichlet weights


def test_dirichlet_n1_is_unit():
    w = numopt.draw_dirichlet_weights(1, generator(0))
    assert w.shape == (1,)
    assert w[0] == 1.0


def test_dirichlet_simplex_invariants():
    rng = generator(1)
    for n in (1, 2, 3, 17, 100, 10_000):
        w = numopt.draw_dirichlet_weights(n, rng)
        assert w.shape == (n,)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-12


def test_dirichlet_mean():
    rng = generator(2)
    n, reps = 10, 100_000
    e = rng.standard_exponential((reps, n))
    w = e / e.sum(axis=1, keepdims=True)
    se = w.std(axis=0) / np.sqrt(reps)
    assert np.all(np.abs(w.mean(axis=0) - 1.0 / n) < 3 * se + 1e-12)


def test_dirichlet_variance_closed_form():
    rng = generator(3)
    n, reps = 5, 100_000
    e = rng.standard_exponential((reps, n))
    w = e / e.sum(axis=1, keepdims=True)
    target = (n - 1) / (n**2 * (n + 1))     # 4/150 for n=5
    assert abs(target - 4.0 / 150.0) < 1e-15
    dev2 = (w - 1.0 / n) ** 2
    se = dev2.std(axis=0) / np.sqrt(reps)
    assert np.all(np.abs(dev2.mean(axis=0) - target) < 3 * se)


def test_dirichlet_exchangeable_coordinates():
    rng = generator(4)
    n, reps = 6, 40_000
    e = rng.standard_exponential((reps, n))
    w = e / e.sum(axis=1, keepdims=True)
    means = w.mean(axis=0)
    se = w.std(axis=0) / np.sqrt(reps)
    # all coordinate means agree pairwise within Monte Carlo error
    for i in range(n):
        for j in range(i + 1, n):
            assert abs(means[i] - means[j]) < 4 * np.hypot(se[i], se[j])


# ---------------------------------------------------------------------------
# Weighted least squares


def test_wls_two_points_define_line():
    fit = numopt.wls_fit(np.array([[1.0, 0.0], [1.0, 1.0]]),
                         np.array([1.0, 3.0]), np.array([0.5, 0.5]))
    assert fit.converged
    np.testing.assert_allclose(fit.coef, [1.0, 2.0], atol=1e-12)


def test_wls_weighted_mean():
    fit = numopt.wls_fit(np.ones((3, 1)), np.array([0.0, 1.0, 2.0]),
                         np.array([0.5, 0.25, 0.25]))
    np.testing.assert_allclose(fit.coef, [0.75], atol=1e-12)


def test_wls_random_matches_normal_equations_oracle():
    rng = generator(5)
    for _ in range(10):
        x = rng.standard_normal((20, 3))
        y = rng.standard_normal(20)
        w = numopt.draw_dirichlet_weights(20, rng)
        fit = numopt.wls_fit(x, y, w)
        ref = oracles.normal_equations_fit(x, y, w)
        np.testing.assert_allclose(fit.coef, ref, atol=1e-10)
        resid = y - x @ fit.coef
        assert np.linalg.norm(x.T @ (w * resid)) <= 1e-8 * np.linalg.norm(y)


def test_wls_equal_weights_is_ols():
    rng = generator(6)
    x = rng.standard_normal((25, 4))
    y = x @ np.array([1.0, -2.0, 0.5, 3.0]) + rng.standard_normal(25)
    fit = numopt.wls_fit(x, y, np.full(25, 1.0 / 25))
    ols = oracles.normal_equations_fit(x, y, np.ones(25))
    np.testing.assert_allclose(fit.coef, ols, atol=1e-10)


def test_wls_collinear_design_is_ridged_and_flagged():
    rng = generator(7)
    c = rng.standard_normal(12)
    x = np.column_stack([c, c])            # exactly collinear
    fit = numopt.wls_fit(x, rng.standard_normal(12), np.full(12, 1.0 / 12))
    assert fit.ridged
    assert np.all(np.isfinite(fit.coef))


def test_wls_hopeless_design_raises():
    # a zero design cannot be rescued by the relative ridge
    x = np.zeros((8, 2))
    with pytest.raises(SingularDesignError):
        numopt.wls_fit(x, np.ones(8), np.full(8, 1.0 / 8))


# ---------------------------------------------------------------------------
# Weighted logistic


def test_wlogit_balanced_intercept_is_zero():
    fit = numopt.wlogit_fit(np.ones((2, 1)), np.array([0.0, 1.0]),
                            np.array([0.5, 0.5]))
    assert fit.converged
    assert abs(fit.coef[0]) < 1e-8


def test_wlogit_weighted_intercept_closed_form():
    fit = numopt.wlogit_fit(np.ones((2, 1)), np.array([0.0, 1.0]),
                            np.array([0.25, 0.75]))
    # logit(0.75) = log 3
    np.testing.assert_allclose(fit.coef, [np.log(3.0)], atol=1e-8)
    assert abs(fit.coef[0] - 1.0986) < 1e-4


def test_wlogit_random_matches_grid_oracle():
    rng = generator(8)
    for _ in range(5):
        x = np.column_stack([np.ones(30), rng.standard_normal(30)])
        true = np.array([0.3, -0.8])
        z = (rng.random(30) < numopt.expit(x @ true)).astype(float)
        if z.min() == z.max():
            continue
        w = numopt.draw_dirichlet_weights(30, rng)
        fit = numopt.wlogit_fit(x, z, w)
        ref = oracles.grid_maximize(
            lambda t: oracles.wlogit_loglik(x, z, w, t),
            lo=fit.coef - 2.0, hi=fit.coef + 2.0, rounds=9)
        np.testing.assert_allclose(fit.coef, ref, atol=1e-6)


def test_wlogit_score_norm_when_converged():
    rng = generator(9)
    for _ in range(20):
        x = np.column_stack([np.ones(40), rng.standard_normal((40, 2))])
        z = (rng.random(40) < 0.5).astype(float)
        w = numopt.draw_dirichlet_weights(40, rng)
        fit = numopt.wlogit_fit(x, z, w)
        if fit.converged:
            p = numopt.expit(x @ fit.coef)
            score = x.T @ (w * (z - p))
            assert np.linalg.norm(score) <= 1e-10


def test_wlogit_separation_raises():
    x = np.column_stack([np.ones(20), np.linspace(-2, 2, 20)])
    z = (x[:, 1] > 0).astype(float)        # perfectly separated
    with pytest.raises(SeparationError):
        numopt.wlogit_fit(x, z, np.full(20, 1.0 / 20))


def test_wlogit_ridge_tames_separation():
    x = np.column_stack([np.ones(20), np.linspace(-2, 2, 20)])
    z = (x[:, 1] > 0).astype(float)
    fit = numopt.wlogit_fit(x, z, np.full(20, 1.0 / 20), ridge=1e-4)
    assert np.all(np.isfinite(fit.coef))
    assert np.linalg.norm(fit.coef) < 1e4


# ---------------------------------------------------------------------------
# Estimating-equation solver


def test_solve_linear_root():
    fit = numopt.solve_estimating_equation(lambda t: t - 2.0, init=np.zeros(1))
    np.testing.assert_allclose(fit.coef, [2.0], atol=1e-9)


def test_solve_cubic_root():
    fit = numopt.solve_estimating_equation(lambda t: t**3 - 8.0,
                                           init=np.ones(1))
    np.testing.assert_allclose(fit.coef, [2.0], atol=1e-8)


def _poisson_score(omat, z, y, w):
    def score(t):
        beta, psi = t[:-1], t[-1]
        mu = np.exp(omat @ beta + z * psi)
        resid = w * np.exp(-z * psi) * (y - mu)
        return np.concatenate([omat.T @ resid, [(z - 0.5) @ resid]])
    return score


def test_solve_poisson_matches_grid_oracle():
    rng = generator(10)
    n = 40
    omat = np.ones((n, 1))
    z = (rng.random(n) < 0.5).astype(float)
    y = rng.poisson(np.exp(0.4 + 0.6 * z)).astype(float)
    w = numopt.draw_dirichlet_weights(n, rng)
    score = _poisson_score(omat, z, y, w)
    fit = numopt.solve_estimating_equation(score, init=np.zeros(2))
    ref = oracles.grid_minimize(
        lambda t: float(np.sum(score(t) ** 2)),
        lo=(-2.0, -2.0), hi=(3.0, 3.0), rounds=12)
    np.testing.assert_allclose(fit.coef, ref, atol=1e-5)


def test_solve_rootless_score_errors_out():
    with pytest.raises((MaxIterationsError, DivergedStepError,
                        SingularDesignError)):
        # score bounded away from zero: no root exists
        numopt.solve_estimating_equation(lambda t: np.exp(t) + 1.0,
                                         init=np.zeros(1))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_solve_linear_score_property(seed):
    rng = generator(seed)
    d = int(rng.integers(2, 5))
    a = rng.standard_normal((d, d)) + np.eye(d) * d  # keep well conditioned
    b = rng.standard_normal(d)
    fit = numopt.solve_estimating_equation(lambda t: a @ t - b,
                                           init=np.zeros(d))
    ref = oracles.solve_full_pivot(a, b)
    np.testing.assert_allclose(fit.coef, ref, atol=1e-9)
