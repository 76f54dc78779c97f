"""Maximum-likelihood Dirichlet regression with Wald inference (the baseline).

Means use the multivariate logit link with one base dimension whose
coefficients are fixed at zero; the precision uses a log link::

    mu_ij  = exp(x_i. b_.j) / sum_k exp(x_i. b_.k),   b_.base = 0
    phi_i  = exp(w_i. g)
    alpha_ij = mu_ij * phi_i

The free parameter vector is the non-base columns of ``b`` (row-major over
covariates) followed by ``g``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import digamma, gammaln

from .dirichlet import fit_moments, rdirichlet, replace_zeros
from .errors import ConvergenceError, DegenerateDataError, DomainError, InferenceUnavailableWarning
from .links import softmax
from .model import CompositionDataset

GRAD_TOL = 1e-6


@dataclass
class MLFit:
    """Fitted baseline model.

    ``beta_ml`` is Q x P with the base column identically zero; ``wald_p`` has
    the same shape and is NaN in the base column.
    """

    beta_ml: np.ndarray
    beta_phi_ml: np.ndarray
    cov: np.ndarray
    log_likelihood: float
    wald_p: np.ndarray
    wald_p_phi: np.ndarray
    base: int = 0
    grad_max: float = math.nan
    n_starts: int = 0
    inference_available: bool = True
    names: list = field(default_factory=list)
    mean_names: tuple = ()
    precision_names: tuple = ()

    @property
    def theta(self) -> np.ndarray:
        return _pack(self.beta_ml, self.beta_phi_ml, self.base)

    def std_errors(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.sqrt(np.diag(self.cov))

    def mean(self, X) -> np.ndarray:
        return softmax(np.asarray(X, dtype=float) @ self.beta_ml)

    def precision(self, W) -> np.ndarray:
        return np.exp(np.asarray(W, dtype=float) @ self.beta_phi_ml)


def _free_dims(P, base):
    return [j for j in range(P) if j != base]


def _pack(beta, beta_phi, base):
    P = beta.shape[1]
    return np.concatenate([beta[:, _free_dims(P, base)].ravel(), beta_phi])


def _unpack(theta, Q, P, R, base):
    free = _free_dims(P, base)
    beta = np.zeros((Q, P))
    beta[:, free] = theta[: Q * (P - 1)].reshape(Q, P - 1)
    return beta, theta[Q * (P - 1) :]


def parameter_names(dataset: CompositionDataset, base: int = 0) -> list:
    """Names of the free parameters in vector order."""
    free = _free_dims(dataset.P, base)
    names = [f"beta[{k + 1},{j + 1}]" for k in range(dataset.Q) for j in free]
    return names + [f"beta_phi[{r + 1}]" for r in range(dataset.R)]


def ml_loglik(theta, X, W, log_y, base: int = 0) -> float:
    """Dirichlet log-likelihood of the baseline model."""
    Q, R = X.shape[1], W.shape[1]
    P = log_y.shape[1]
    beta, beta_phi = _unpack(np.asarray(theta, dtype=float), Q, P, R, base)
    alpha = softmax(X @ beta) * np.exp(W @ beta_phi)[:, None]
    return float(np.sum(gammaln(alpha.sum(axis=1))) - np.sum(gammaln(alpha)) + np.sum((alpha - 1.0) * log_y))


def ml_loglik_grad(theta, X, W, log_y, base: int = 0) -> np.ndarray:
    """Analytic gradient of :func:`ml_loglik`."""
    Q, R = X.shape[1], W.shape[1]
    P = log_y.shape[1]
    beta, beta_phi = _unpack(np.asarray(theta, dtype=float), Q, P, R, base)
    mu = softmax(X @ beta)
    phi = np.exp(W @ beta_phi)
    alpha = mu * phi[:, None]
    g = digamma(phi)[:, None] - digamma(alpha) + log_y
    # d loglik / d eta_ik = phi_i mu_ik (g_ik - sum_j mu_ij g_ij)
    d_eta = phi[:, None] * mu * (g - np.sum(mu * g, axis=1, keepdims=True))
    d_lphi = np.sum(alpha * g, axis=1)
    d_beta = X.T @ d_eta
    return np.concatenate([d_beta[:, _free_dims(P, base)].ravel(), W.T @ d_lphi])


def numeric_hessian(grad, theta, rel_step: float = 1e-4) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrised."""
    theta = np.asarray(theta, dtype=float)
    D = theta.size
    H = np.empty((D, D))
    for a in range(D):
        h = rel_step * (1.0 + abs(theta[a]))
        tp, tm = theta.copy(), theta.copy()
        tp[a] += h
        tm[a] -= h
        H[:, a] = (grad(tp) - grad(tm)) / (2.0 * h)
    return 0.5 * (H + H.T)


def moment_start(dataset: CompositionDataset, base: int = 0) -> np.ndarray:
    """Least-squares start on the log-ratio scale, precision from moments."""
    Yc = np.clip(dataset.Y, 1e-3, None)
    lr = np.log(Yc) - np.log(Yc[:, [base]])
    beta = np.linalg.lstsq(dataset.X, lr, rcond=None)[0]
    beta[:, base] = 0.0
    try:
        # moments only need a start value, so tiny entries may be floored
        a0 = fit_moments(replace_zeros(dataset.Y)).alpha0
    except DegenerateDataError:
        a0 = 1.0
    beta_phi = np.linalg.lstsq(dataset.W, np.full(dataset.n, math.log(a0)), rcond=None)[0]
    return _pack(beta, beta_phi, base)


def _newton_polish(f, grad, theta, max_steps=50):
    """Damped Newton steps until the gradient max-norm drops below GRAD_TOL."""
    trace = []
    for _ in range(max_steps):
        g = grad(theta)
        gmax = float(np.max(np.abs(g)))
        trace.append((f(theta), gmax))
        if gmax < GRAD_TOL:
            break
        H = numeric_hessian(grad, theta)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or g @ step <= 0:
            step = g / max(1.0, float(np.max(np.abs(g))))
        f0, t = f(theta), 1.0
        while t > 1e-10:
            cand = theta + t * step
            fc = f(cand)
            if np.isfinite(fc) and fc >= f0 - 1e-12:
                theta = cand
                break
            t *= 0.5
        else:
            break
    return theta, trace


def fit_ml_regression(dataset: CompositionDataset, base: int = 0, seed: int = 0, n_perturb: int = 2,
                      max_iter: int = 1000) -> MLFit:
    """Maximum-likelihood fit with restarts and Wald covariance.

    Raises
    ------
    ConvergenceError
        If no start reaches a gradient max-norm below ``GRAD_TOL``.
    """
    if not 0 <= base < dataset.P:
        raise DomainError(f"base dimension {base} outside 0..{dataset.P - 1}")
    X, W = dataset.X, dataset.W
    ly = np.log(dataset.Y)
    f = lambda th: ml_loglik(th, X, W, ly, base)
    grad = lambda th: ml_loglik_grad(th, X, W, ly, base)

    def negf(th):
        v = f(th)
        return -v if np.isfinite(v) else np.inf

    start = moment_start(dataset, base)
    rng = np.random.default_rng(seed)
    starts = [start] + [start + 0.5 * rng.standard_normal(start.size) for _ in range(n_perturb)]
    best, best_ll, trace = None, -np.inf, []
    for s, th0 in enumerate(starts):
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.minimize(negf, th0, jac=lambda th: -grad(th), method="BFGS",
                                    options={"gtol": GRAD_TOL, "maxiter": max_iter})
            th, polish = _newton_polish(f, grad, res.x)
        ll = f(th)
        gmax = float(np.max(np.abs(grad(th))))
        trace.append({"start": s, "bfgs_iter": int(res.nit), "loglik": ll, "grad_max": gmax,
                      "polish": polish})
        if gmax < GRAD_TOL and ll > best_ll:
            best, best_ll = th, ll
    if best is None:
        last = max(trace, key=lambda t: t["loglik"] if np.isfinite(t["loglik"]) else -np.inf)
        raise ConvergenceError(
            f"no start reached gradient max-norm < {GRAD_TOL:g} (best {last['grad_max']:.3g})",
            last=last, trace=trace,
        )

    Q, P, R = dataset.Q, dataset.P, dataset.R
    H = numeric_hessian(grad, best)
    cov, ok = _covariance(H)
    beta, beta_phi = _unpack(best, Q, P, R, base)
    fit = MLFit(
        beta_ml=beta, beta_phi_ml=np.array(beta_phi), cov=cov, log_likelihood=best_ll,
        wald_p=np.full((Q, P), np.nan), wald_p_phi=np.full(R, np.nan), base=base,
        grad_max=float(np.max(np.abs(grad(best)))), n_starts=len(starts), inference_available=ok,
        names=parameter_names(dataset, base), mean_names=tuple(dataset.mean_names),
        precision_names=tuple(dataset.precision_names),
    )
    if ok:
        p = wald_test(fit)
        fit.wald_p[:, _free_dims(P, base)] = p[: Q * (P - 1)].reshape(Q, P - 1)
        fit.wald_p_phi[:] = p[Q * (P - 1) :]
    return fit


def _covariance(H):
    """Inverse of the observed information, or NaNs when it is not positive definite."""
    info = -H
    try:
        lam = np.linalg.eigvalsh(info)
    except np.linalg.LinAlgError:
        lam = np.array([0.0])
    if not np.all(np.isfinite(lam)) or lam.min() <= 1e-10 * max(1.0, abs(lam.max())):
        warnings.warn("observed information is singular or indefinite; Wald inference unavailable",
                      InferenceUnavailableWarning, stacklevel=3)
        return np.full_like(H, np.nan), False
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T), True


def wald_test(fit: MLFit) -> np.ndarray:
    """Two-sided normal p-values of every free parameter, in vector order."""
    est = fit.theta
    var = np.diag(fit.cov)
    p = np.full(est.size, np.nan)
    bad = ~(var > 0)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} coefficient(s) have non-positive variance; no p-value",
                      InferenceUnavailableWarning, stacklevel=2)
    z = est[~bad] / np.sqrt(var[~bad])
    p[~bad] = 2.0 * stats.norm.sf(np.abs(z))
    return p


@dataclass
class MLIntervals:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    pred_lower: np.ndarray
    pred_upper: np.ndarray


def ml_intervals(fit: MLFit, X, W, level: float = 0.95, n_draws: int = 2000, seed: int = 0) -> MLIntervals:
    """Mean and predictive intervals by simulating from the Wald normal.

    Parameter vectors are drawn from N(theta_hat, cov); each yields a mean
    surface (for the mean intervals) and one Dirichlet draw per observation
    (for the predictive intervals). Falls back to degenerate intervals at the
    point estimate when the covariance is unavailable.
    """
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    mu_hat = fit.mean(X)
    if not fit.inference_available:
        return MLIntervals(mu_hat, mu_hat.copy(), mu_hat.copy(), np.zeros_like(mu_hat), np.ones_like(mu_hat))
    rng = np.random.default_rng(seed)
    Q, P = fit.beta_ml.shape
    R = fit.beta_phi_ml.size
    draws = rng.multivariate_normal(fit.theta, fit.cov, size=n_draws, method="eigh")
    mus = np.empty((n_draws,) + mu_hat.shape)
    preds = np.empty_like(mus)
    for k in range(n_draws):
        b, g = _unpack(draws[k], Q, P, R, fit.base)
        mus[k] = softmax(X @ b)
        preds[k] = rdirichlet(mus[k] * np.exp(W @ g)[:, None], rng)
    q = [(1 - level) / 2, (1 + level) / 2]
    lo, hi = np.quantile(mus, q, axis=0)
    plo, phi_ = np.quantile(preds, q, axis=0)
    return MLIntervals(mu_hat, lo, hi, plo, phi_)
