"""Link functions between linear predictors and means / precisions."""

import numpy as np

from .errors import DomainError


def _scalar_or_array(out):
    return float(out) if np.ndim(out) == 0 else out


def logit(p):
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError("logit needs 0 < p < 1")
    return _scalar_or_array(np.log(p) - np.log1p(-p))


def inv_logit(x):
    """Logistic function, evaluated on whichever side avoids overflow."""
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _scalar_or_array(out)


def log_inv_logit(x):
    """ln(inv_logit(x)) without underflow for large negative x."""
    x = np.asarray(x, dtype=float)
    return _scalar_or_array(-np.logaddexp(0.0, -x))


def log_link(phi):
    phi = np.asarray(phi, dtype=float)
    if np.any(~(phi > 0)):
        raise DomainError("log link needs phi > 0")
    return _scalar_or_array(np.log(phi))


def inv_log(x):
    return _scalar_or_array(np.exp(np.asarray(x, dtype=float)))


def softmax(eta) -> np.ndarray:
    """Row-wise softmax with the row maximum subtracted first."""
    eta = np.asarray(eta, dtype=float)
    z = np.exp(eta - eta.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def multivariate_logit_inverse(eta, base: int = 0) -> np.ndarray:
    """Means from multivariate-logit predictors whose ``base`` column is zero."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if np.any(eta[:, base] != 0.0):
        raise DomainError(f"column {base} of the predictor matrix must be zero (base dimension)")
    return softmax(eta)
