"""Adaptive Metropolis-within-Gibbs sampler for the penalized Dirichlet model.

Per iteration: block random-walk moves for all coefficients (beta and
beta_phi together), once with log_alpha held fixed and once with log_alpha
carried along; per-group random-effect moves in the same two flavours and
log-scale moves for sigma_u (when enabled); single-site moves for every
log_alpha entry; exact Gamma draws for xi and xi_star; and a rescaling move
for xi_star that keeps the standardised latent deviations fixed.

Block proposals are shaped by the curvature of the target, re-estimated at
the end of every burn-in window. Proposal scales follow a Robbins-Monro
recursion towards ``target_accept`` during burn-in. Both shapes and scales
are frozen afterwards.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
from scipy.special import digamma as _digamma

from . import kernels
from .dirichlet import fit_moments, rdirichlet, replace_zeros
from .errors import DegenerateDataError, DiagnosticsError, DiagnosticsWarning, DomainError, InitializationError
from .links import inv_logit, log_inv_logit
from .model import (
    CoefficientSet,
    CompositionDataset,
    LatentState,
    ModelConfig,
    apply_corrections,
    log_penalized_posterior,
)
from .parallel import pmap

BLOCKS = ("beta", "beta_phi", "u", "sigma_u", "log_alpha", "xi", "xi_star")
LOW_ACCEPTANCE = 0.05


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 2
    n_burnin: int = 2000
    n_iter: int = 4000
    thin: int = 2
    seed: int = 0
    target_accept: float = 0.4
    adapt_window: int = 50
    #: "numba", "numpy" or None for the import-time default
    backend: str | None = None
    #: block names from ``BLOCKS`` held at their initial values
    frozen: tuple = ()

    def __post_init__(self):
        for name in ("n_chains", "n_iter", "thin", "adapt_window"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.n_burnin < 0 or self.n_burnin >= self.n_iter:
            raise DomainError("need 0 <= n_burnin < n_iter")
        if (self.n_iter - self.n_burnin) // self.thin < 1:
            raise DomainError("no draws would be retained")
        if not 0 < self.target_accept < 1:
            raise DomainError("target_accept must lie in (0, 1)")
        unknown = set(self.frozen) - set(BLOCKS)
        if unknown:
            raise DomainError(f"unknown blocks {sorted(unknown)}")

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.n_burnin) // self.thin


@dataclass
class PosteriorChain:
    """Retained draws of one chain (leading axis = draw)."""

    beta: np.ndarray
    beta_phi: np.ndarray
    xi: np.ndarray
    xi_star: np.ndarray
    log_alpha: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    mu_adj: np.ndarray
    alpha_adj: np.ndarray
    u: np.ndarray | None = None
    sigma_u: np.ndarray | None = None
    acceptance: dict = field(default_factory=dict)
    #: final proposal scales, for diagnostics
    scales: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    mean_names: tuple = ()
    precision_names: tuple = ()

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def flat(self) -> tuple[list, np.ndarray]:
        """Parameter names and an (n_draws, n_params) matrix of draws."""
        K, Q, P = self.beta.shape
        names = [f"beta[{k + 1},{j + 1}]" for k in range(Q) for j in range(P)]
        cols = [self.beta.reshape(K, Q * P)]
        names += [f"beta_phi[{r + 1}]" for r in range(self.beta_phi.shape[1])]
        cols.append(self.beta_phi)
        names += ["xi", "xi_star"]
        cols += [self.xi[:, None], self.xi_star[:, None]]
        if self.u is not None:
            G = self.u.shape[1]
            names += [f"u[{g + 1},{j + 1}]" for g in range(G) for j in range(P)]
            cols.append(self.u.reshape(K, G * P))
            names += [f"sigma_u[{j + 1}]" for j in range(P)]
            cols.append(self.sigma_u)
        return names, np.hstack(cols)


@dataclass
class FitSummary:
    names: list
    mean: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    p_value: np.ndarray
    rhat: np.ndarray
    ess: np.ndarray
    n_draws: int
    mu_mean: np.ndarray
    mu_median: np.ndarray
    mu_lower: np.ndarray
    mu_upper: np.ndarray

    def row(self, name: str) -> dict:
        i = self.names.index(name)
        return {
            "mean": self.mean[i], "median": self.median[i], "lower": self.lower[i],
            "upper": self.upper[i], "p_value": self.p_value[i], "rhat": self.rhat[i], "ess": self.ess[i],
        }


# --------------------------------------------------------------------------
# conditionals and initial values
# --------------------------------------------------------------------------


def gamma_conditional_xi(mu, config: ModelConfig = ModelConfig()) -> tuple[float, float]:
    """(shape, rate) of the Gamma full conditional of xi given raw means."""
    mu = np.atleast_2d(mu)
    n, P = mu.shape
    r = mu.sum(axis=1) - 1.0
    return n / 2.0 + 1.0, 0.5 * float(r @ r) + 1.0 / config.xi_mean(P)


def gamma_conditional_xi_star(log_alpha, mu, phi, config: ModelConfig = ModelConfig()) -> tuple[float, float]:
    """(shape, rate) of the Gamma full conditional of xi_star."""
    la = np.atleast_2d(log_alpha)
    n, P = la.shape
    d = la - np.log(mu) - np.log(np.asarray(phi))[:, None]
    return n * P / 2.0 + 1.0, 0.5 * float(np.sum(d * d)) + 1.0 / config.xi_star_mean(P)


def initial_state(dataset: CompositionDataset, config: ModelConfig) -> tuple[CoefficientSet, LatentState]:
    """Least-squares start on the logit scale; precision from the moments fit."""
    X, W, Y = dataset.X, dataset.W, dataset.Y
    z = np.log(np.clip(Y, 0.001, 0.999)) - np.log1p(-np.clip(Y, 0.001, 0.999))
    beta = np.linalg.lstsq(X, z, rcond=None)[0]
    try:
        a0 = fit_moments(replace_zeros(Y)).alpha0
    except DegenerateDataError:
        a0 = 1.0
    ones = np.full(dataset.n, math.log(a0))
    beta_phi = np.linalg.lstsq(W, ones, rcond=None)[0]
    beta_phi[np.abs(beta_phi) < 1e-12] = 0.0
    u = sigma_u = None
    if config.random_effects:
        u = np.zeros((dataset.G, dataset.P))
        sigma_u = np.full(dataset.P, config.sigma_u_prior_mean)
    coeffs = CoefficientSet(beta, beta_phi, u, sigma_u)
    eta = X @ beta
    la = log_inv_logit(eta) + (W @ beta_phi)[:, None]
    latent = LatentState(la, config.xi_mean(dataset.P), config.xi_star_mean(dataset.P))
    return coeffs, latent


def _sqrt_cov(neg_hess: np.ndarray, max_var: float) -> np.ndarray:
    """Square root of the inverse of a (regularised) negative Hessian."""
    H = 0.5 * (neg_hess + neg_hess.T)
    lam, U = np.linalg.eigh(H)
    # absolute eigenvalues keep the shape sensible away from the mode
    lam = np.abs(np.where(np.isfinite(lam), lam, 0.0))
    lam = np.maximum(lam, max(1.0 / max_var, 1e-3 * float(lam.max(initial=0.0))))
    return U / np.sqrt(lam)


def _group_index(group, n, G):
    if group is None:
        return np.zeros(n, dtype=np.int64), np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.argsort(group, kind="stable").astype(np.int64)
    counts = np.bincount(group, minlength=G)
    gptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return group.astype(np.int64), gptr, order


class _Curvature:
    """Finite-difference curvature of the coefficient and random-effect targets.

    Used only during burn-in to shape the random-walk proposals.
    """

    def __init__(self, X, W, ly, group, G, V):
        self.X, self.W, self.ly, self.group, self.G, self.V = X, W, ly, group, G, V
        self.Q, self.R, self.P = X.shape[1], W.shape[1], ly.shape[1]

    def _eta_grads(self, eta, lphi, la_fixed, dev, xi, xs, mode):
        mu = inv_logit(eta)
        lmu = log_inv_logit(eta)
        r = mu.sum(axis=1) - 1.0
        if mode == 0:
            d = la_fixed - lmu - lphi[:, None]
            g_eta = xs * d * (1.0 - mu)
            g_l = xs * d.sum(axis=1)
        else:
            a = np.exp(dev + lmu + lphi[:, None])
            g = a * (_digamma(a.sum(axis=1))[:, None] - _digamma(a) + self.ly)
            g_eta = g * (1.0 - mu)
            g_l = g.sum(axis=1)
        g_eta = g_eta - xi * r[:, None] * mu * (1.0 - mu)
        return g_eta, g_l

    def theta(self, beta, beta_phi, uoff, la, xi, xs, mode, free):
        Q, P = self.Q, self.P
        theta0 = np.concatenate([beta.ravel(), beta_phi])
        eta0 = self.X @ beta + uoff
        dev = la - log_inv_logit(eta0) - (self.W @ beta_phi)[:, None]

        def grad(th):
            b = th[: Q * P].reshape(Q, P)
            eta = self.X @ b + uoff
            lphi = self.W @ th[Q * P :]
            g_eta, g_l = self._eta_grads(eta, lphi, la, dev, xi, xs, mode)
            return np.concatenate([(self.X.T @ g_eta).ravel(), self.W.T @ g_l]) - th / self.V

        idx = np.flatnonzero(free)
        H = np.zeros((idx.size, idx.size))
        for c, a in enumerate(idx):
            h = 1e-5 * (1.0 + abs(theta0[a]))
            tp, tm = theta0.copy(), theta0.copy()
            tp[a] += h
            tm[a] -= h
            H[:, c] = (grad(tp) - grad(tm))[idx] / (2.0 * h)
        L = np.zeros((theta0.size, theta0.size))
        L[np.ix_(idx, idx)] = _sqrt_cov(-H, self.V)
        return L

    def u(self, beta, beta_phi, u, su, la, xi, xs, mode):
        G, P = self.G, self.P
        base = self.X @ beta
        lphi = self.W @ beta_phi
        eta0 = base + u[self.group]
        dev = la - log_inv_logit(eta0) - lphi[:, None]

        def grad(uu):
            g_eta, _ = self._eta_grads(base + uu[self.group], lphi, la, dev, xi, xs, mode)
            out = np.zeros((G, P))
            np.add.at(out, self.group, g_eta)
            return out - uu / su[None, :] ** 2

        H = np.zeros((G, P, P))
        for j in range(P):
            h = 1e-5 * (1.0 + np.abs(u[:, j]))
            up, um = u.copy(), u.copy()
            up[:, j] += h
            um[:, j] -= h
            H[:, :, j] = (grad(up) - grad(um)) / (2.0 * h[:, None])
        return np.stack([_sqrt_cov(-H[g], 10.0 * float(np.max(su)) ** 2 + 1.0) for g in range(G)])


# --------------------------------------------------------------------------
# one chain
# --------------------------------------------------------------------------


def _ridge_columns(X, group, G):
    """Mean-design columns that are constant within every group.

    For such a column the coefficient and the group effects can trade a
    constant without changing any linear predictor.
    """
    cols, vals = [], []
    for q in range(X.shape[1]):
        xg = np.zeros(G)
        xg[group] = X[:, q]
        if np.allclose(X[:, q], xg[group]) and np.any(xg != 0):
            cols.append(q)
            vals.append(xg)
    return cols, np.array(vals)


def _ridge_shift(beta_q, u, xg, su, V, z):
    """Exact Gibbs draw along beta_q. += c, u_g. -= c x_g (likelihood unchanged)."""
    prec = 1.0 / V + (xg @ xg) / su**2
    centre = (-beta_q / V + (xg @ u) / su**2) / prec
    c = centre + z / np.sqrt(prec)
    beta_q += c
    u -= np.outer(xg, c)


def _level_shift(W, ly, beta_phi, la, lphi, ll, V, steps, log_u):
    """Move each precision coefficient together with every log_alpha.

    ``beta_phi[r] += d`` and ``la[i] += d * W[i, r]`` leave the deviations
    ``la - log mu - log phi`` untouched, so only the Dirichlet likelihood
    and the coefficient prior enter the acceptance ratio.  Returns the
    accept flags.
    """
    acc = np.zeros(len(steps))
    for r, d in enumerate(steps):
        shift = d * W[:, r]
        la_new = la + shift[:, None]
        ll_new = kernels.dirichlet_row_loglik_numpy(la_new, ly)
        b = beta_phi[r]
        log_r = float(np.sum(ll_new - ll)) - ((b + d) ** 2 - b**2) / (2.0 * V)
        if log_u[r] < log_r:
            beta_phi[r] = b + d
            la[:] = la_new
            lphi += shift
            ll[:] = ll_new
            acc[r] = 1.0
    return acc


def _precision_ridge(W, ly, beta_phi, la, eta, lphi, ll, hyp, step, log_u):
    """Joint move of (log xi_star, beta_phi) carrying log_alpha along.

    Deviations of log_alpha from its mean are rescaled by
    sqrt(xi_star / xi_star') while the mean follows the new precision
    coefficients. The Jacobian of that map cancels the change in the
    normalising constant of the latent normal, which leaves the Dirichlet
    likelihood, the coefficient and xi_star priors and the log-scale
    proposal term. Returns 1.0 on acceptance.
    """
    xs = hyp[2]
    xs_new = xs * math.exp(step[0])
    bp_new = beta_phi + step[1:]
    lphi_new = W @ bp_new
    lmu = log_inv_logit(eta)
    c = math.sqrt(xs / xs_new)
    la_new = lmu + lphi_new[:, None] + c * (la - lmu - lphi[:, None])
    ll_new = kernels.dirichlet_row_loglik_numpy(la_new, ly)
    V = hyp[0]
    log_r = (float(np.sum(ll_new - ll)) - (bp_new @ bp_new - beta_phi @ beta_phi) / (2.0 * V)
             - hyp[4] * (xs_new - xs) + step[0])
    if not log_u < log_r:
        return 0.0
    beta_phi[:] = bp_new
    la[:] = la_new
    lphi[:] = lphi_new
    ll[:] = ll_new
    hyp[2] = xs_new
    return 1.0


def _run_chain(args) -> PosteriorChain:
    dataset, mconf, sconf, seed_seq, init, jitter = args
    rng = np.random.default_rng(seed_seq)
    sweep, _ = kernels.get_sweep(sconf.backend)
    re = mconf.random_effects
    n, P, Q, R = dataset.n, dataset.P, dataset.Q, dataset.R
    G = dataset.G if re else 0
    D = Q * P + R

    coeffs, latent = init if init is not None else initial_state(dataset, mconf)
    beta = np.array(coeffs.beta, dtype=float)
    if jitter:
        beta = beta + 0.1 * rng.standard_normal(beta.shape)
    beta_phi = np.array(coeffs.beta_phi, dtype=float)
    la = np.array(latent.log_alpha, dtype=float)
    if jitter:
        la = log_inv_logit(dataset.X @ beta) + (dataset.W @ beta_phi)[:, None]
    u = np.array(coeffs.u, dtype=float) if re else np.zeros((0, P))
    su = np.array(coeffs.sigma_u, dtype=float) if re else np.ones(P)

    check = log_penalized_posterior(
        dataset, CoefficientSet(beta, beta_phi, u if re else None, su if re else None),
        LatentState(la, latent.xi, latent.xi_star), mconf,
    )
    if not np.isfinite(check):
        raise InitializationError("log posterior is not finite at the initial state")

    X = np.ascontiguousarray(dataset.X)
    W = np.ascontiguousarray(dataset.W)
    ly = np.ascontiguousarray(np.log(dataset.Y))
    group, gptr, grows = _group_index(dataset.group if re else None, n, G)
    eta = X @ beta + (u[group] if re else 0.0)
    lphi = W @ beta_phi
    ll = kernels.dirichlet_row_loglik_numpy(la, ly)
    hyp = np.array([
        mconf.prior_beta_variance, latent.xi, latent.xi_star,
        1.0 / mconf.xi_mean(P), 1.0 / mconf.xi_star_mean(P), mconf.sigma_u_prior_mean,
        0.5, 0.0,
    ])
    frozen = set(sconf.frozen)
    free = np.concatenate([np.full(Q * P, "beta" not in frozen), np.full(R, "beta_phi" not in frozen)])
    la_free = "log_alpha" not in frozen
    xs_free = "xi_star" not in frozen
    upd = np.array([
        free.any(), free.any() and la_free,
        re and "u" not in frozen, re and "u" not in frozen and la_free,
        re and "sigma_u" not in frozen, la_free, "xi" not in frozen, xs_free, xs_free and la_free,
    ], dtype=np.int64)

    curv = _Curvature(X, W, ly, group, G, mconf.prior_beta_variance)
    ridge_q, ridge_x = _ridge_columns(X, group, G) if upd[2] and free[: Q * P].all() else ([], None)
    level_on = bool(free[Q * P :].all() and la_free)
    ridge_on = bool(level_on and xs_free)
    ridge_hist = np.empty((sconf.n_burnin, R + 1))
    ridge_L = np.diag(np.r_[0.5, np.full(R, 0.1)])

    theta_hist = np.empty((sconf.n_burnin, D))
    idx_free = np.flatnonzero(free)

    def refresh_shapes(n_seen=0):
        uoff = u[group] if re else 0.0
        Lt = np.stack([curv.theta(beta, beta_phi, uoff, la, hyp[1], hyp[2], mode, free) for mode in (0, 1)])
        if n_seen >= max(200, 10 * D):
            # joint moves follow the global shape of the recent burn-in draws
            recent = theta_hist[n_seen // 2 : n_seen][:, idx_free]
            lam, U = np.linalg.eigh(np.atleast_2d(np.cov(recent, rowvar=False)))
            lam = np.maximum(lam, 1e-12 + 1e-8 * max(float(lam.max()), 0.0))
            Lt[1] = 0.0
            Lt[1][np.ix_(idx_free, idx_free)] = U * np.sqrt(lam)
        if G:
            Lu = np.stack([curv.u(beta, beta_phi, u, su, la, hyp[1], hyp[2], mode) for mode in (0, 1)])
        else:
            Lu = np.zeros((2, 0, P, P))
        return Lt, Lu

    L_theta, L_u = refresh_shapes()
    d_free = max(int(free.sum()), 1)
    # log proposal scales, adapted during burn-in
    ls_theta = np.full(2, math.log(2.38 / math.sqrt(d_free)))
    ls_u = np.full(2, math.log(2.38 / math.sqrt(P)))
    ls_la = np.full((n, P), math.log(min(1.0, 1.0 / math.sqrt(latent.xi_star))))
    ls_su = np.full(P, math.log(0.5))
    ls_xs = math.log(0.5)
    ls_lvl = np.full(R, math.log(0.1))
    ls_pr = math.log(2.38 / math.sqrt(R + 1))

    acc_theta = np.zeros(2)
    acc_u = np.zeros((2, G))
    acc_la = np.zeros((n, P))
    acc_su = np.zeros(P)
    post_keys = ("theta_centred", "theta_joint", "u_centred", "u_joint", "sigma_u", "log_alpha", "xi_star")
    post_on = np.array([upd[0], upd[1], upd[2], upd[3], upd[4], upd[5], upd[8]], dtype=bool)
    post_sum = np.zeros(len(post_keys))
    n_post = 0
    post_lvl = 0.0
    post_pr = 0.0

    K = sconf.n_retained
    out = {
        "beta": np.empty((K, Q, P)), "beta_phi": np.empty((K, R)), "xi": np.empty(K),
        "xi_star": np.empty(K), "log_alpha": np.empty((K, n, P)), "mu": np.empty((K, n, P)),
        "phi": np.empty((K, n)),
    }
    if re:
        out["u"] = np.empty((K, G, P))
        out["sigma_u"] = np.empty((K, P))
    shapes_gamma = np.array([n / 2.0 + 1.0, n * P / 2.0 + 1.0])

    it = 0
    kept = 0
    n_adapt = 0
    while it < sconf.n_iter:
        # random numbers are drawn per window; windows never straddle burn-in
        end = min(it + sconf.adapt_window, sconf.n_burnin if it < sconf.n_burnin else sconf.n_iter)
        m = end - it
        z_theta = rng.standard_normal((m, 2, D))
        lu_theta = np.log(rng.random((m, 2)))
        z_u = rng.standard_normal((m, 2, G, P))
        lu_u = np.log(rng.random((m, 2, G)))
        z_la = rng.standard_normal((m, n, P))
        lu_la = np.log(rng.random((m, n, P)))
        z_su = rng.standard_normal((m, P))
        lu_su = np.log(rng.random((m, P)))
        gam = np.empty((m, 4))
        gam[:, :2] = rng.standard_gamma(shapes_gamma, size=(m, 2))
        gam[:, 2] = rng.standard_normal(m)
        gam[:, 3] = np.log(rng.random(m))
        z_ridge = rng.standard_normal((m, len(ridge_q), P))
        z_lvl = rng.standard_normal((m, R))
        lu_lvl = np.log(rng.random((m, R)))
        s_lvl = np.exp(ls_lvl)
        win_lvl = np.zeros(R)
        z_pr = rng.standard_normal((m, R + 1))
        lu_pr = np.log(rng.random(m))
        s_pr = math.exp(ls_pr)
        win_pr = 0.0

        s_theta, s_u, s_la, s_su = np.exp(ls_theta), np.exp(ls_u), np.exp(ls_la), np.exp(ls_su)
        hyp[6] = math.exp(ls_xs)
        win_theta = np.zeros(2)
        win_u = np.zeros(2)
        win_la = np.zeros((n, P))
        win_su = np.zeros(P)
        win_xs = 0.0
        for t in range(m):
            sweep(X, W, ly, group, gptr, grows,
                  beta, beta_phi, la, u, su, eta, lphi, ll, hyp, upd,
                  L_theta, s_theta, L_u, s_u, s_la, s_su,
                  z_theta[t], lu_theta[t], z_u[t], lu_u[t], z_la[t], lu_la[t], z_su[t], lu_su[t], gam[t],
                  acc_theta, acc_u, acc_la, acc_su)
            for k, q in enumerate(ridge_q):
                _ridge_shift(beta[q], u, ridge_x[k], su, hyp[0], z_ridge[t, k])
            if level_on:
                acc_lvl = _level_shift(W, ly, beta_phi, la, lphi, ll, hyp[0], s_lvl * z_lvl[t], lu_lvl[t])
                win_lvl += acc_lvl
                if it >= sconf.n_burnin:
                    post_lvl += acc_lvl.mean()
            if ridge_on:
                acc_pr = _precision_ridge(W, ly, beta_phi, la, eta, lphi, ll, hyp, s_pr * (ridge_L @ z_pr[t]), lu_pr[t])
                win_pr += acc_pr
                if it < sconf.n_burnin:
                    ridge_hist[it] = np.r_[math.log(hyp[2]), beta_phi]
                else:
                    post_pr += acc_pr
            mean_u = acc_u.mean(axis=1) if G else np.zeros(2)
            win_theta += acc_theta
            win_u += mean_u
            win_la += acc_la
            win_su += acc_su
            win_xs += hyp[7]
            if it < sconf.n_burnin:
                theta_hist[it, : Q * P] = beta.ravel()
                theta_hist[it, Q * P :] = beta_phi
            if it >= sconf.n_burnin:
                post_sum += (acc_theta[0], acc_theta[1], mean_u[0], mean_u[1], acc_su.mean(), acc_la.mean(), hyp[7])
                n_post += 1
                if (it - sconf.n_burnin + 1) % sconf.thin == 0:
                    out["beta"][kept] = beta
                    out["beta_phi"][kept] = beta_phi
                    out["xi"][kept] = hyp[1]
                    out["xi_star"][kept] = hyp[2]
                    out["log_alpha"][kept] = la
                    out["mu"][kept] = inv_logit(eta)
                    out["phi"][kept] = np.exp(lphi)
                    if re:
                        out["u"][kept] = u
                        out["sigma_u"][kept] = su
                    kept += 1
            it += 1
        if len(ridge_q):
            eta[:] = X @ beta + u[group]
        if end <= sconf.n_burnin:
            n_adapt += 1
            gain = 1.0 / math.sqrt(n_adapt)
            tgt = sconf.target_accept
            ls_theta += gain * (win_theta / m - tgt) * upd[:2]
            ls_u += gain * (win_u / m - tgt) * upd[2:4]
            ls_la += gain * (win_la / m - tgt) * upd[5]
            ls_su += gain * (win_su / m - tgt) * upd[4]
            ls_xs += gain * (win_xs / m - tgt) * upd[8]
            ls_lvl += gain * (win_lvl / m - tgt) * level_on
            ls_pr += gain * (win_pr / m - tgt) * ridge_on
            if ridge_on and end >= 100:
                recent = ridge_hist[end // 2 : end]
                lam, U = np.linalg.eigh(np.atleast_2d(np.cov(recent, rowvar=False)))
                ridge_L = U * np.sqrt(np.maximum(lam, 1e-10 + 1e-8 * max(float(lam.max()), 0.0)))
            L_theta, L_u = refresh_shapes(end)

    mu_adj, alpha_adj = apply_corrections(out["mu"], out["phi"])
    acceptance = {k: float(v / n_post) for k, v, on in zip(post_keys, post_sum, post_on) if on and n_post}
    if level_on and n_post:
        acceptance["precision_level"] = float(post_lvl / n_post)
    if ridge_on and n_post:
        acceptance["precision_xi_star"] = float(post_pr / n_post)
    chain = PosteriorChain(
        beta=out["beta"], beta_phi=out["beta_phi"], xi=out["xi"], xi_star=out["xi_star"],
        log_alpha=out["log_alpha"], mu=out["mu"], phi=out["phi"], mu_adj=mu_adj,
        alpha_adj=alpha_adj, u=out.get("u"), sigma_u=out.get("sigma_u"), acceptance=acceptance,
        scales={"theta": np.exp(ls_theta), "u": np.exp(ls_u), "sigma_u": np.exp(ls_su), "xi_star": math.exp(ls_xs)},
        mean_names=tuple(dataset.mean_names), precision_names=tuple(dataset.precision_names),
    )
    if acceptance and np.mean(list(acceptance.values())) < LOW_ACCEPTANCE:
        chain.warnings.append(f"overall acceptance {np.mean(list(acceptance.values())):.3f} below {LOW_ACCEPTANCE}")
    return chain


def run(
    dataset: CompositionDataset,
    model_config: ModelConfig = ModelConfig(),
    sampler_config: SamplerConfig = SamplerConfig(),
    init=None,
    workers: int = 1,
) -> list[PosteriorChain]:
    """Run ``n_chains`` independent chains; deterministic given the seed.

    ``init`` optionally fixes the starting ``(CoefficientSet, LatentState)``
    (all chains then start there without jitter).
    """
    if model_config.random_effects and dataset.group is None:
        raise DomainError("random_effects=True needs a group column")
    seeds = np.random.SeedSequence(sampler_config.seed).spawn(sampler_config.n_chains)
    jobs = [(dataset, model_config, sampler_config, s, init, c > 0 and init is None) for c, s in enumerate(seeds)]
    chains = pmap(_run_chain, jobs, workers)
    for c, ch in enumerate(chains):
        for msg in ch.warnings:
            warnings.warn(f"chain {c}: {msg}", DiagnosticsWarning, stacklevel=2)
    return chains


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


def rhat(draws: np.ndarray) -> np.ndarray:
    """Gelman-Rubin potential scale reduction; ``draws`` is (chains, n, params).

    A single chain is split into halves.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[..., None]
    if draws.shape[0] == 1:
        h = draws.shape[1] // 2
        draws = np.stack([draws[0, :h], draws[0, h : 2 * h]])
    m, n = draws.shape[:2]
    means = draws.mean(axis=1)
    B = n * means.var(axis=0, ddof=1)
    Wv = draws.var(axis=1, ddof=1).mean(axis=0)
    var_plus = (n - 1) / n * Wv + B / n
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(var_plus / Wv)
    return np.where(Wv > 0, out, np.nan)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    x = x - x.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, n=size, axis=0)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n]
    return ac / n


def ess(draws: np.ndarray) -> np.ndarray:
    """Multi-chain effective sample size (Geyer initial monotone sequence)."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[..., None]
    m, n, p = draws.shape
    out = np.full(p, np.nan)
    acov = np.stack([_autocov(draws[c]) for c in range(m)])  # (m, n, p)
    chain_var = acov[:, 0, :] * n / (n - 1)
    W = chain_var.mean(axis=0)
    B_over_n = draws.mean(axis=1).var(axis=0, ddof=1) if m > 1 else np.zeros(p)
    var_plus = W * (n - 1) / n + B_over_n
    for k in range(p):
        if not var_plus[k] > 0:
            continue
        rho = 1.0 - (W[k] - acov[:, :, k].mean(axis=0)) / var_plus[k]
        rho[0] = 1.0
        total = 0.0
        prev = np.inf
        for t in range(0, n - 1, 2):
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            prev = pair
            total += pair
        tau = max(2.0 * total - 1.0, 1.0 / math.log10(max(m * n, 10)))
        out[k] = m * n / tau
    return out


def bayes_p_value(draws: np.ndarray) -> np.ndarray:
    """Doubled posterior tail probability 2 min(P(theta > 0), P(theta < 0))."""
    draws = np.asarray(draws, dtype=float)
    pos = np.mean(draws > 0, axis=0)
    neg = np.mean(draws < 0, axis=0)
    return np.minimum(1.0, 2.0 * np.minimum(pos, neg))


def summarize(chains: list[PosteriorChain], level: float = 0.95) -> FitSummary:
    if not chains:
        raise DiagnosticsError("no chains to summarise")
    names, _ = chains[0].flat()
    stacked = np.stack([c.flat()[1] for c in chains])  # (m, n, p)
    pooled = stacked.reshape(-1, stacked.shape[-1])
    if pooled.shape[0] < 100:
        raise DiagnosticsError(f"need at least 100 retained draws, have {pooled.shape[0]}")
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    p_val = np.full(len(names), np.nan)
    coef = np.array([nm.startswith("beta") for nm in names])
    p_val[coef] = bayes_p_value(pooled[:, coef])
    mu_all = np.concatenate([c.mu_adj for c in chains])
    return FitSummary(
        names=names,
        mean=pooled.mean(axis=0),
        median=np.median(pooled, axis=0),
        lower=np.quantile(pooled, lo_q, axis=0),
        upper=np.quantile(pooled, hi_q, axis=0),
        p_value=p_val,
        rhat=rhat(stacked),
        ess=ess(stacked),
        n_draws=pooled.shape[0],
        mu_mean=mu_all.mean(axis=0),
        mu_median=np.median(mu_all, axis=0),
        mu_lower=np.quantile(mu_all, lo_q, axis=0),
        mu_upper=np.quantile(mu_all, hi_q, axis=0),
    )


@dataclass
class PredictiveDraws:
    draws: np.ndarray  # (K, n, P)
    lower: np.ndarray
    upper: np.ndarray
    mean: np.ndarray


def posterior_predictive(chains: list[PosteriorChain], dataset=None, seed: int = 0, level: float = 0.95) -> PredictiveDraws:
    """One Dirichlet draw per retained draw and observation, from alpha_adj."""
    alpha = np.concatenate([c.alpha_adj for c in chains])
    if dataset is not None and alpha.shape[1:] != dataset.Y.shape:
        raise DomainError("chains do not match the dataset")
    rng = np.random.default_rng(seed)
    draws = rdirichlet(alpha, rng)
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    return PredictiveDraws(
        draws=draws,
        lower=np.quantile(draws, lo_q, axis=0),
        upper=np.quantile(draws, hi_q, axis=0),
        mean=draws.mean(axis=0),
    )


# --------------------------------------------------------------------------
# chain dumps
# --------------------------------------------------------------------------


def write_chain_csv(chain: PosteriorChain, path) -> None:
    names, M = chain.flat()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def read_chain_csv(path) -> tuple[list, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        names = next(r)
        rows = [[float(v) for v in row] for row in r if row]
    return names, np.array(rows)
