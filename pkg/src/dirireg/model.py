"""Datasets, design matrices and the hierarchical penalized Dirichlet model.

Every mean is modelled on its own logit scale (no reference dimension),
the precision through a log link, and the sum-to-one restriction on the
means is replaced by a Normal soft constraint with precision ``xi``::

    y_i.          ~ Dirichlet(exp(log_alpha_i.))
    log_alpha_ij  ~ N(log mu_ij + log phi_i, 1 / xi_star)
    log phi_i     = w_i. beta_phi
    logit mu_ij   = x_i. beta_.j (+ u_g(i)j)
    sum_j mu_ij   ~ N(1, 1 / xi)
    beta, beta_phi ~ N(0, prior_beta_variance)
    xi_star ~ Exp(mean 100 / P),  xi ~ Exp(mean 1000 / P)
    u_gj ~ N(0, sigma_u_j**2),  sigma_u_j ~ Exp(mean sigma_u_prior_mean)
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, digamma

from .dirichlet import MIN_COMPONENT, ZERO_REPLACEMENT, check_compositions, replace_zeros
from .errors import DimensionError, DomainError
from .links import inv_logit, log_inv_logit

LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# data containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    prior_beta_variance: float = 10000.0
    xi_prior_mean: float | None = None  # default 1000 / P
    xi_star_prior_mean: float | None = None  # default 100 / P
    random_effects: bool = False
    sigma_u_prior_mean: float = 1.0

    def __post_init__(self):
        for name in ("prior_beta_variance", "xi_prior_mean", "xi_star_prior_mean", "sigma_u_prior_mean"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise DomainError(f"{name} must be positive")

    def xi_mean(self, P: int) -> float:
        return self.xi_prior_mean if self.xi_prior_mean is not None else 1000.0 / P

    def xi_star_mean(self, P: int) -> float:
        return self.xi_star_prior_mean if self.xi_star_prior_mean is not None else 100.0 / P


@dataclass(frozen=True)
class CompositionDataset:
    """Responses with their mean and precision designs.

    ``group`` holds zero-based integer codes 0..G-1 (``group_levels`` maps
    them back to the original labels).
    """

    Y: np.ndarray
    X: np.ndarray
    W: np.ndarray
    group: np.ndarray | None = None
    response_names: tuple = ()
    mean_names: tuple = ()
    precision_names: tuple = ()
    group_levels: tuple = ()
    coding: str = "custom"
    meta: dict = field(default_factory=dict)
    #: smallest accepted response entry (see ``check_compositions``)
    min_component: float = MIN_COMPONENT

    def __post_init__(self):
        Y = check_compositions(self.Y, min_component=self.min_component)
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        n, P = Y.shape
        if X.shape[0] != n or W.shape[0] != n:
            raise DimensionError("X, W and Y must have the same number of rows")
        for name, M, names in (("mean", X, self.mean_names), ("precision", W, self.precision_names)):
            if not np.all(np.isfinite(M)):
                raise DomainError(f"{name} design has non-finite entries")
            check_full_rank(M, names or tuple(f"{name}[{k + 1}]" for k in range(M.shape[1])), name)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W", W)
        if self.group is not None:
            g = np.asarray(self.group)
            if g.shape != (n,) or not np.issubdtype(g.dtype, np.integer):
                raise DimensionError("group must be an integer vector of length n")
            G = int(g.max()) + 1
            if g.min() != 0 or np.unique(g).size != G:
                raise DomainError("group codes must be contiguous 0..G-1")
            object.__setattr__(self, "group", g.astype(np.int64))
            if not self.group_levels:
                object.__setattr__(self, "group_levels", tuple(str(i + 1) for i in range(G)))
        if not self.response_names:
            object.__setattr__(self, "response_names", tuple(f"y{j + 1}" for j in range(P)))
        if not self.mean_names:
            object.__setattr__(self, "mean_names", tuple(f"x{k + 1}" for k in range(X.shape[1])))
        if not self.precision_names:
            object.__setattr__(self, "precision_names", tuple(f"w{k + 1}" for k in range(W.shape[1])))

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def P(self) -> int:
        return self.Y.shape[1]

    @property
    def Q(self) -> int:
        return self.X.shape[1]

    @property
    def R(self) -> int:
        return self.W.shape[1]

    @property
    def G(self) -> int:
        return 0 if self.group is None else int(self.group.max()) + 1

    def without_groups(self) -> "CompositionDataset":
        return CompositionDataset(
            self.Y, self.X, self.W, None, self.response_names, self.mean_names,
            self.precision_names, (), self.coding, dict(self.meta), self.min_component,
        )


@dataclass
class CoefficientSet:
    beta: np.ndarray  # (Q, P)
    beta_phi: np.ndarray  # (R,)
    u: np.ndarray | None = None  # (G, P)
    sigma_u: np.ndarray | None = None  # (P,)

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        self.beta_phi = np.atleast_1d(np.asarray(self.beta_phi, dtype=float))
        arrays = [self.beta, self.beta_phi]
        if self.u is not None:
            self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
            arrays.append(self.u)
        if self.sigma_u is not None:
            self.sigma_u = np.atleast_1d(np.asarray(self.sigma_u, dtype=float))
            if np.any(self.sigma_u <= 0):
                raise DomainError("sigma_u must be positive")
            arrays.append(self.sigma_u)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise DomainError("coefficients must be finite")


@dataclass
class LatentState:
    log_alpha: np.ndarray  # (n, P)
    xi: float
    xi_star: float

    def __post_init__(self):
        self.log_alpha = np.atleast_2d(np.asarray(self.log_alpha, dtype=float))
        if not (self.xi > 0 and self.xi_star > 0):
            raise DomainError("xi and xi_star must be positive")


# --------------------------------------------------------------------------
# design matrices
# --------------------------------------------------------------------------


def check_full_rank(M: np.ndarray, names, what: str = "design") -> None:
    """Raise naming the first column that makes ``M`` rank deficient."""
    if M.shape[1] == 0:
        raise DimensionError(f"{what} design has no columns")
    for k in range(1, M.shape[1] + 1):
        if np.linalg.matrix_rank(M[:, :k]) < k:
            raise DimensionError(f"{what} design is rank deficient at column '{names[k - 1]}'")


def _levels(values):
    levels = []
    seen = set()
    for v in values:
        if v not in seen:
            seen.add(v)
            levels.append(v)
    try:
        return sorted(levels, key=float)
    except (TypeError, ValueError):
        return sorted(levels)


def cell_means_columns(factor, name: str = "f"):
    """One indicator column per level, no intercept."""
    levels = _levels(factor)
    arr = np.asarray(factor)
    cols = np.column_stack([(arr == lv).astype(float) for lv in levels])
    return cols, [f"{name}[{lv}]" for lv in levels]


def treatment_columns(factor, name: str = "f"):
    """Indicators for every level but the first (use with an intercept)."""
    cols, names = cell_means_columns(factor, name)
    return cols[:, 1:], names[1:]


def build_design(columns: dict, factors=(), coding: str = "auto", intercept: bool | None = None):
    """Assemble a design matrix from named columns.

    ``columns`` maps names to length-n sequences; names listed in ``factors``
    are expanded to indicators. With ``coding="auto"`` a lone factor gets
    cell-means coding, anything else gets treatment coding plus an intercept.
    Returns ``(matrix, names, coding_used)``.
    """
    names = list(columns)
    if coding == "auto":
        coding = "cell-means" if len(names) == 1 and names[0] in factors else "treatment"
    if coding not in ("cell-means", "treatment"):
        raise ValueError(f"unknown coding {coding!r}")
    n = len(next(iter(columns.values()))) if columns else None
    blocks, out_names = [], []
    use_intercept = (coding == "treatment") if intercept is None else intercept
    if use_intercept:
        if n is None:
            raise DimensionError("cannot size an intercept-only design without n")
        blocks.append(np.ones((n, 1)))
        out_names.append("(Intercept)")
    first_factor = True
    for name in names:
        values = columns[name]
        if name in factors:
            if coding == "cell-means" and first_factor and not use_intercept:
                cols, cn = cell_means_columns(values, name)
            else:
                cols, cn = treatment_columns(values, name)
            first_factor = False
        else:
            cols, cn = np.asarray(values, dtype=float)[:, None], [name]
        blocks.append(cols)
        out_names.extend(cn)
    return np.column_stack(blocks), out_names, coding


def intercept_design(n: int):
    return np.ones((n, 1)), ["(Intercept)"]


# --------------------------------------------------------------------------
# CSV loading
# --------------------------------------------------------------------------


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_table(path):
    """Read a header-first CSV into ``(header, {name: list of str})``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        cols = {h: [] for h in header}
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            for h, c in zip(header, row):
                cols[h].append(c.strip())
    return header, cols


def load_csv(
    path,
    response=None,
    mean_cols=(),
    precision_cols=(),
    group=None,
    coding: str = "auto",
) -> CompositionDataset:
    """Load a dataset from CSV.

    Response columns default to ``y1..yP``. Non-numeric covariates are treated
    as factors. Rows whose response sum is off by more than 1e-6 are
    renormalised with a warning; components below 1e-6 get multiplicative
    zero replacement (also warned and recorded in ``meta``).
    """
    header, cols = read_table(path)
    if response is None:
        response = [h for h in header if h.startswith("y") and h[1:].isdigit()]
        response.sort(key=lambda h: int(h[1:]))
    response = list(response)
    for name in [*response, *mean_cols, *precision_cols, *([group] if group else [])]:
        if name not in cols:
            raise KeyError(f"unknown column '{name}'")
    if len(response) < 2:
        raise DimensionError("need at least two response columns")
    rows = []
    for name in response:
        vals = cols[name]
        for i, v in enumerate(vals):
            if not _is_number(v):
                raise ValueError(f"{path}: line {i + 2}: column '{name}' is not numeric: {v!r}")
        rows.append([float(v) for v in vals])
    Y = np.array(rows).T
    if np.any(Y < 0) or not np.all(np.isfinite(Y)):
        raise DomainError("responses must be finite and non-negative")
    meta = {}
    off = np.abs(Y.sum(axis=1) - 1.0) > 1e-6
    if off.any():
        warnings.warn(f"{int(off.sum())} response rows renormalised to sum to one", stacklevel=2)
        meta["renormalised_rows"] = int(off.sum())
    Y = Y / Y.sum(axis=1, keepdims=True)
    if np.any(Y < ZERO_REPLACEMENT):
        k = int((Y < ZERO_REPLACEMENT).sum())
        warnings.warn(f"{k} response entries below {ZERO_REPLACEMENT:g} replaced", stacklevel=2)
        meta["zero_replacement"] = {"eps": ZERO_REPLACEMENT, "entries": k}
        Y = replace_zeros(Y)

    def design(names):
        if not names:
            X, nm = intercept_design(Y.shape[0])
            return X, nm, "intercept"
        factors = [c for c in names if not all(_is_number(v) for v in cols[c])]
        return build_design({c: cols[c] for c in names}, factors=factors, coding=coding)

    X, xn, used = design(list(mean_cols))
    W, wn, _ = design(list(precision_cols))
    g = levels = None
    if group:
        levels = _levels(cols[group])
        index = {lv: i for i, lv in enumerate(levels)}
        g = np.array([index[v] for v in cols[group]], dtype=np.int64)
    return CompositionDataset(
        Y, X, W, g, tuple(response), tuple(xn), tuple(wn), tuple(levels or ()), used, meta
    )


# --------------------------------------------------------------------------
# model surfaces
# --------------------------------------------------------------------------


def linear_predictor(X, beta, u=None, group=None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    if X.shape[1] != beta.shape[0]:
        raise DimensionError(f"X has {X.shape[1]} columns but beta has {beta.shape[0]} rows")
    eta = X @ beta
    if u is not None:
        if group is None:
            raise DimensionError("random effects need group codes")
        u = np.atleast_2d(np.asarray(u, dtype=float))
        group = np.asarray(group)
        if group.shape != (X.shape[0],) or u.shape[1] != beta.shape[1]:
            raise DimensionError("random-effect shapes do not conform")
        eta = eta + u[group]
    return eta


def mean_surface(X, beta, u=None, group=None) -> np.ndarray:
    """Raw means inv_logit(X beta (+ u)); rows are not forced to sum to one."""
    return inv_logit(linear_predictor(X, beta, u, group))


def precision_surface(W, beta_phi) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    beta_phi = np.atleast_1d(np.asarray(beta_phi, dtype=float))
    if W.shape[1] != beta_phi.shape[0]:
        raise DimensionError(f"W has {W.shape[1]} columns but beta_phi has {beta_phi.shape[0]}")
    return np.exp(W @ beta_phi)


def apply_corrections(mu_draw, phi_draw):
    """Renormalise raw means per row and rebuild alpha = mu_adj * phi.

    Works on a single draw ((n, P), (n,)) or a stack ((K, n, P), (K, n)).
    """
    mu = np.asarray(mu_draw, dtype=float)
    phi = np.asarray(phi_draw, dtype=float)
    if mu.shape[:-1] != phi.shape:
        raise DimensionError("phi must have one entry per mean row")
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise DomainError("means and precisions must be positive")
    mu_adj = mu / mu.sum(axis=-1, keepdims=True)
    return mu_adj, mu_adj * phi[..., None]


# --------------------------------------------------------------------------
# penalized log posterior
# --------------------------------------------------------------------------


def dirichlet_loglik_rows(log_alpha, log_y) -> np.ndarray:
    """Per-row Dirichlet log-likelihood with alpha = exp(log_alpha)."""
    a = np.exp(log_alpha)
    return gammaln(a.sum(axis=1)) - gammaln(a).sum(axis=1) + ((a - 1.0) * log_y).sum(axis=1)


def _normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _exp_logpdf(x, mean):
    return -math.log(mean) - x / mean


def _validate(dataset, coeffs, latent, config):
    n, P = dataset.n, dataset.P
    if coeffs.beta.shape != (dataset.Q, P):
        raise DimensionError(f"beta must be {(dataset.Q, P)}, got {coeffs.beta.shape}")
    if coeffs.beta_phi.shape != (dataset.R,):
        raise DimensionError(f"beta_phi must have length {dataset.R}")
    if latent.log_alpha.shape != (n, P):
        raise DimensionError(f"log_alpha must be {(n, P)}")
    if not (latent.xi > 0 and latent.xi_star > 0):
        raise DomainError("xi and xi_star must be positive")
    if config.random_effects:
        if dataset.group is None:
            raise DimensionError("random effects need a grouped dataset")
        if coeffs.u is None or coeffs.sigma_u is None:
            raise DimensionError("random effects enabled but u / sigma_u missing")
        if coeffs.u.shape != (dataset.G, P) or coeffs.sigma_u.shape != (P,):
            raise DimensionError("u must be (G, P) and sigma_u length P")


def posterior_terms(dataset, coeffs, latent, config) -> dict:
    """The additive pieces of :func:`log_penalized_posterior`."""
    _validate(dataset, coeffs, latent, config)
    P = dataset.P
    re = config.random_effects
    eta = linear_predictor(dataset.X, coeffs.beta, coeffs.u if re else None, dataset.group if re else None)
    mu = inv_logit(eta)
    log_mu = log_inv_logit(eta)
    log_phi = dataset.W @ coeffs.beta_phi
    la = latent.log_alpha
    V = config.prior_beta_variance
    terms = {
        "likelihood": float(dirichlet_loglik_rows(la, np.log(dataset.Y)).sum()),
        "latent": float(_normal_logpdf(la, log_mu + log_phi[:, None], 1.0 / latent.xi_star).sum()),
        "constraint": float(_normal_logpdf(mu.sum(axis=1), 1.0, 1.0 / latent.xi).sum()),
        "beta_prior": float(_normal_logpdf(coeffs.beta, 0.0, V).sum()
                            + _normal_logpdf(coeffs.beta_phi, 0.0, V).sum()),
        "xi_prior": _exp_logpdf(latent.xi, config.xi_mean(P)),
        "xi_star_prior": _exp_logpdf(latent.xi_star, config.xi_star_mean(P)),
        "random_effects": 0.0,
    }
    if re:
        su = coeffs.sigma_u
        terms["random_effects"] = float(
            _normal_logpdf(coeffs.u, 0.0, su[None, :] ** 2).sum()
            + np.sum(_exp_logpdf(su, config.sigma_u_prior_mean))
        )
    return terms


def log_penalized_posterior(dataset, coeffs, latent, config) -> float:
    """Unnormalised log posterior density of the hierarchical model."""
    return float(sum(posterior_terms(dataset, coeffs, latent, config).values()))


def log_penalized_posterior_grad(dataset, coeffs, latent, config) -> dict:
    """Analytic gradient with respect to beta, beta_phi and log_alpha."""
    _validate(dataset, coeffs, latent, config)
    re = config.random_effects
    X, W = dataset.X, dataset.W
    eta = linear_predictor(X, coeffs.beta, coeffs.u if re else None, dataset.group if re else None)
    mu = inv_logit(eta)
    log_mu = log_inv_logit(eta)
    log_phi = W @ coeffs.beta_phi
    la = latent.log_alpha
    dev = la - log_mu - log_phi[:, None]
    resid = mu.sum(axis=1) - 1.0
    V = config.prior_beta_variance
    # d/d eta of latent and constraint terms
    d_eta = latent.xi_star * dev * (1.0 - mu) - latent.xi * resid[:, None] * mu * (1.0 - mu)
    a = np.exp(la)
    d_la = a * (digamma(a.sum(axis=1))[:, None] - digamma(a) + np.log(dataset.Y)) - latent.xi_star * dev
    out = {
        "beta": X.T @ d_eta - coeffs.beta / V,
        "beta_phi": W.T @ (latent.xi_star * dev.sum(axis=1)) - coeffs.beta_phi / V,
        "log_alpha": d_la,
    }
    if re:
        su = coeffs.sigma_u
        out["u"] = np.zeros_like(coeffs.u)
        np.add.at(out["u"], dataset.group, d_eta)
        out["u"] -= coeffs.u / su[None, :] ** 2
    return out
