"""The Dirichlet distribution on the unit simplex.

Density, moments, marginals, sampling, and direct fitting by the method of
moments or by maximum likelihood (Minka's fixed-point iteration).

Component indices are zero-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, digamma as _psi

from .errors import ConvergenceError, DegenerateDataError, DimensionError, DomainError
from .special import inverse_digamma

#: Entries smaller than this are not accepted as composition components.
MIN_COMPONENT = 1e-12
#: Replacement value used by :func:`replace_zeros`.
ZERO_REPLACEMENT = 1e-6
SUM_TOL = 1e-9


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray
    alpha0: float = field(init=False)

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float).reshape(-1)
        if a.size < 2:
            raise DimensionError("a Dirichlet needs at least two components")
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise DomainError("concentration parameters must be finite and positive")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "alpha0", float(a.sum()))

    @property
    def P(self) -> int:
        return self.alpha.size


@dataclass(frozen=True)
class Composition:
    """A strictly positive vector summing to one."""

    y: np.ndarray

    def __post_init__(self):
        y = check_compositions(self.y)[0]
        y.setflags(write=False)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class MomentSummary:
    mean: np.ndarray
    covariance: np.ndarray


def _as_params(params) -> DirichletParams:
    return params if isinstance(params, DirichletParams) else DirichletParams(params)


def check_compositions(Y, tol: float = SUM_TOL, min_component: float = MIN_COMPONENT) -> np.ndarray:
    """Validate rows of ``Y`` as compositions and return a float 2-d copy.

    Entries below ``min_component`` are rejected. The default floor guards
    user data against unreplaced zeros; simulated data may pass a lower one.
    """
    Y = np.array(Y.y if isinstance(Y, Composition) else Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2 or Y.shape[1] < 2:
        raise DimensionError(f"compositions must be (n, P>=2), got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise DomainError("compositions must be finite")
    if np.any(Y < min_component) or np.any(Y <= 0):
        raise DomainError(
            f"composition entries must be >= {min_component:g}; apply replace_zeros() first"
        )
    bad = np.abs(Y.sum(axis=1) - 1.0) > tol
    if np.any(bad):
        raise DomainError(f"rows {np.flatnonzero(bad)[:5].tolist()} do not sum to 1")
    return Y


def replace_zeros(Y, eps: float = ZERO_REPLACEMENT) -> np.ndarray:
    """Multiplicative replacement of (near-)zero components.

    Entries below ``eps`` become ``eps``; the remaining entries of the row are
    rescaled so that the row keeps summing to one and their ratios are kept.
    """
    Y = np.array(Y, dtype=float)
    if Y.ndim == 1:
        return replace_zeros(Y[None, :], eps)[0]
    Y = Y / Y.sum(axis=1, keepdims=True)
    small = Y < eps
    if not small.any():
        return Y
    k = small.sum(axis=1, keepdims=True)
    rest = np.where(small, 0.0, Y)
    rest_sum = rest.sum(axis=1, keepdims=True)
    if np.any(k * eps >= 1.0):
        raise DomainError("too many zero components to replace")
    scaled = rest * (1.0 - k * eps) / rest_sum
    return np.where(small, eps, scaled)


def log_density(y, params) -> float | np.ndarray:
    """ln f(y) with the normalising constant Gamma(alpha0) / prod Gamma(alpha_j).

    ``y`` may be a single composition or an (n, P) array, in which case one
    value per row is returned.
    """
    p = _as_params(params)
    single = np.ndim(y.y if isinstance(y, Composition) else y) == 1
    Y = check_compositions(y)
    if Y.shape[1] != p.P:
        raise DimensionError("composition and parameter lengths differ")
    a = p.alpha
    out = gammaln(p.alpha0) - gammaln(a).sum() + np.log(Y) @ (a - 1.0)
    return float(out[0]) if single else out


def loglik(Y, alpha) -> float:
    """Total log-likelihood of the rows of ``Y`` under D(alpha)."""
    return float(np.sum(log_density(Y, alpha)))


def moments(params) -> MomentSummary:
    p = _as_params(params)
    a, a0 = p.alpha, p.alpha0
    mean = a / a0
    cov = (np.diag(a * a0) - np.outer(a, a)) / (a0**2 * (1.0 + a0))
    return MomentSummary(mean=mean, covariance=cov)


def _log_gamma_variates(shape, rng: np.random.Generator) -> np.ndarray:
    # Gamma(a) = Gamma(a + 1) * U**(1/a); working in logs keeps tiny shapes finite
    shape = np.asarray(shape, dtype=float)
    g = rng.standard_gamma(shape + 1.0)
    u = rng.random(shape.shape)
    return np.log(g) + np.log(u) / shape


def rdirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet draw per row of ``alpha`` (shape (..., P)).

    Rows are normalised in log space, so components may underflow to zero for
    very small concentrations but rows never become NaN.
    """
    lg = _log_gamma_variates(alpha, rng)
    lg -= lg.max(axis=-1, keepdims=True)
    g = np.exp(lg)
    return g / g.sum(axis=-1, keepdims=True)


def sample(params, n: int, rng_seed: int) -> np.ndarray:
    """``n`` independent draws, returned as an (n, P) array of compositions."""
    p = _as_params(params)
    if n < 1:
        raise DomainError("n must be at least 1")
    rng = np.random.default_rng(rng_seed)
    return rdirichlet(np.broadcast_to(p.alpha, (n, p.P)), rng)


def marginal(params, subset) -> DirichletParams:
    """Dirichlet of the components in ``subset`` plus one aggregated remainder."""
    p = _as_params(params)
    idx = sorted(set(int(i) for i in subset))
    if not idx or len(idx) >= p.P or idx[0] < 0 or idx[-1] >= p.P:
        raise DomainError("subset must be a non-empty proper subset of the components")
    kept = p.alpha[idx]
    return DirichletParams(np.append(kept, p.alpha0 - kept.sum()))


def fit_moments(sample) -> DirichletParams:
    """Method-of-moments fit.

    The precision comes from the first component alone:
    alpha0 = m1 (1 - m1) / var(Y1) - 1. Averaging that relation over all
    components is a common alternative; the single-component form is used
    because it is exact in the two-component case and easy to test.
    """
    Y = check_compositions(sample)
    if Y.shape[0] < 2:
        raise DegenerateDataError("need at least two compositions")
    m = Y.mean(axis=0)
    v = Y[:, 0].var(ddof=1)
    if v <= 0:
        raise DegenerateDataError("first component has zero sample variance")
    a0 = m[0] * (1.0 - m[0]) / v - 1.0
    if a0 <= 0:
        raise DegenerateDataError("sample variance too large for a Dirichlet")
    return DirichletParams(m * a0)


def fit_ml(sample, tol: float = 1e-10, max_iter: int = 1000) -> DirichletParams:
    """Maximum-likelihood fit by Minka's fixed-point iteration.

    Each step solves psi(alpha_j) = psi(alpha0) + mean(log y_j). Starts from
    :func:`fit_moments`; raises :class:`ConvergenceError` carrying the last
    iterate if ``max|delta alpha| < tol`` is not reached.
    """
    Y = check_compositions(sample)
    if Y.shape[0] < 2:
        raise DegenerateDataError("need at least two compositions")
    mean_log = np.log(Y).mean(axis=0)
    a = fit_moments(Y).alpha.copy()
    for _ in range(max_iter):
        a_new = inverse_digamma(_psi(a.sum()) + mean_log)
        delta = np.max(np.abs(a_new - a))
        a = a_new
        if delta < tol:
            return DirichletParams(a)
    raise ConvergenceError(
        f"fixed-point iteration did not converge in {max_iter} steps", last=DirichletParams(a)
    )


def loglik_gradient(Y, alpha) -> np.ndarray:
    """d/d alpha of the total log-likelihood."""
    Y = check_compositions(Y)
    a = np.asarray(alpha, dtype=float)
    n = Y.shape[0]
    return n * (_psi(a.sum()) - _psi(a)) + np.log(Y).sum(axis=0)
