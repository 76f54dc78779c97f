import math
import warnings

import numpy as np
import pytest
from scipy import stats

from dirireg import dirichlet as dc
from dirireg.baseline import (
    MLFit,
    fit_ml_regression,
    ml_intervals,
    ml_loglik,
    ml_loglik_grad,
    numeric_hessian,
    parameter_names,
    wald_test,
)
from dirireg.errors import InferenceUnavailableWarning
from dirireg.model import CompositionDataset
from dirireg.simstudy import ScenarioConfig, generate_scenario_a, generate_scenario_b, mix_seed


def _regression_data(seed=0, n=80):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    W = np.column_stack([np.ones(n), rng.uniform(-1, 1, n)])
    eta = X @ np.array([[0.0, 0.3, -0.5], [0.0, 0.8, 0.2]])
    mu = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
    phi = np.exp(W @ np.array([2.0, 0.5]))
    Y = dc.rdirichlet(mu * phi[:, None], rng)
    return CompositionDataset(Y, X, W)


def test_gradient_matches_central_differences_at_random_points():
    ds = _regression_data()
    ly = np.log(ds.Y)
    rng = np.random.default_rng(1)
    d = ds.Q * (ds.P - 1) + ds.R
    for _ in range(20):
        theta = rng.normal(scale=0.7, size=d)
        g = ml_loglik_grad(theta, ds.X, ds.W, ly)
        fd = np.empty(d)
        for k in range(d):
            h = 1e-5 * max(1.0, abs(theta[k]))
            e = np.zeros(d)
            e[k] = h
            fd[k] = (ml_loglik(theta + e, ds.X, ds.W, ly) - ml_loglik(theta - e, ds.X, ds.W, ly)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_intercept_only_matches_dirichlet_ml():
    Y = dc.sample((2, 3, 5), 400, rng_seed=4)
    ds = CompositionDataset(Y, np.ones((400, 1)), np.ones((400, 1)))
    fit = fit_ml_regression(ds)
    ref = dc.fit_ml(Y)
    np.testing.assert_allclose(fit.mean(np.ones((1, 1)))[0], ref.alpha / ref.alpha0, atol=1e-6)
    assert fit.precision(np.ones((1, 1)))[0] == pytest.approx(ref.alpha0, rel=1e-6)
    assert fit.grad_max < 1e-6
    assert np.all(fit.beta_ml[:, 0] == 0.0)


def test_base_dimension_does_not_change_the_fit():
    ds = _regression_data(seed=2)
    a = fit_ml_regression(ds, base=0)
    b = fit_ml_regression(ds, base=2)
    assert a.log_likelihood == pytest.approx(b.log_likelihood, abs=1e-8)
    np.testing.assert_allclose(a.mean(ds.X), b.mean(ds.X), atol=1e-7)
    np.testing.assert_allclose(a.beta_phi_ml, b.beta_phi_ml, atol=1e-6)
    assert np.all(np.isnan(b.wald_p[:, 2]))


def test_hessian_helper_on_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    H = numeric_hessian(lambda t: -A @ t, np.array([0.3, -0.2]))
    np.testing.assert_allclose(H, -A, atol=1e-8)


def _manual_fit(est, se):
    est = np.asarray(est, dtype=float)
    return MLFit(
        beta_ml=np.column_stack([np.zeros(1), est[:1]]), beta_phi_ml=est[1:],
        cov=np.diag(np.asarray(se, dtype=float) ** 2), log_likelihood=0.0,
        wald_p=np.full((1, 2), np.nan), wald_p_phi=np.full(1, np.nan),
    )


def test_wald_examples():
    p = wald_test(_manual_fit([0.0, 1.96 * 0.3], [0.5, 0.3]))
    assert p[0] == 1.0
    assert p[1] == pytest.approx(0.05, abs=1e-3)
    with pytest.warns(InferenceUnavailableWarning):
        p = wald_test(_manual_fit([1.0, 1.0], [0.0, 1.0]))
    assert np.isnan(p[0])


def test_fit_reports_names_and_pvalues_consistently():
    ds = _regression_data(seed=5)
    fit = fit_ml_regression(ds)
    assert fit.names == parameter_names(ds)
    p = wald_test(fit)
    np.testing.assert_allclose(p[: ds.Q * (ds.P - 1)], fit.wald_p[:, 1:].ravel())
    np.testing.assert_allclose(p[ds.Q * (ds.P - 1):], fit.wald_p_phi)


def test_intervals_bracket_estimates_and_are_reproducible():
    ds, _ = generate_scenario_a(ScenarioConfig(phi=5.0), seed=3)
    fit = fit_ml_regression(ds)
    a = ml_intervals(fit, ds.X, ds.W, seed=1)
    b = ml_intervals(fit, ds.X, ds.W, seed=1)
    np.testing.assert_array_equal(a.lower, b.lower)
    assert np.all(a.lower <= a.mean + 1e-3) and np.all(a.mean - 1e-3 <= a.upper)
    assert np.all(a.pred_lower <= a.lower) and np.all(a.upper <= a.pred_upper)


def test_well_posed_problem_has_inference():
    Y = dc.sample((2, 3), 30, rng_seed=1)
    ds = CompositionDataset(Y, np.ones((30, 1)), np.ones((30, 1)))
    fit = fit_ml_regression(ds)
    assert fit.inference_available


@pytest.mark.slow
def test_scenario_a_phi5_truth_inside_joint_wald_region():
    cfg = ScenarioConfig(phi=5.0)
    B = np.vstack([np.zeros(3), np.asarray(cfg.resolved_coefficients())]).T  # (levels, P)
    truth = np.concatenate([B[:, 1:].ravel(), [math.log(5.0)]])
    crit = stats.chi2.ppf(0.95, truth.size)
    inside = 0
    for r in range(50):
        ds, _ = generate_scenario_a(cfg, seed=mix_seed(11, r))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_ml_regression(ds)
        d = fit.theta - truth
        inside += float(d @ np.linalg.solve(fit.cov, d)) <= crit
    assert inside >= 45


def test_scenario_b_fit_is_finite():
    ds, _, _ = generate_scenario_b(ScenarioConfig(scenario="B"), seed=0)
    fit = fit_ml_regression(ds)
    assert np.all(np.isfinite(fit.theta)) and fit.grad_max < 1e-6
    assert np.all(fit.beta_ml[:, 0] == 0.0)
