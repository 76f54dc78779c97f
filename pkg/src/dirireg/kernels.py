"""One Metropolis-within-Gibbs sweep of the penalized Dirichlet model.

Two interchangeable implementations are provided: ``sweep_numba`` (scalar
loops compiled with numba) and ``sweep_numpy`` (vectorised over rows and
groups). Both consume the same pre-drawn random numbers and make the same
accept/reject decisions, so a single sweep agrees up to floating-point
rounding. Long chains drift apart once a near-tie decision flips.

The coefficient vector ``theta`` is ``beta`` flattened row-major followed by
``beta_phi``. State arrays are updated in place. ``upd`` switches blocks:

    0 theta, centred            1 theta, joint
    2 random effects, centred   3 random effects, joint
    4 sigma_u                   5 log_alpha single-site
    6 xi                        7 xi_star, Gibbs
    8 xi_star, non-centred

The non-centred move rescales xi_star by ``exp(hyp[6] * gam[2])`` and
shrinks every latent deviation log_alpha - log mu - log phi by the matching
factor, so standardised deviations are unchanged. ``gam[3]`` is its log
uniform and the accept flag is written to ``hyp[7]``. ``gam[:2]`` are unit
Gamma variates with the shapes of the two precision conditionals.

Centred moves change coefficients with log_alpha held fixed. Joint moves
translate log_alpha by the change in log mu + log phi, which leaves the latent
Normal term unchanged so the coefficients follow the Dirichlet likelihood
directly. All proposals are symmetric Gaussian random walks
``delta = scale * L @ z`` with a fixed square-root factor ``L``.
"""

import math

import numpy as np
from scipy.special import gammaln

from ._accel import HAVE_NUMBA, njit

N_BLOCKS = 9


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


@njit
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit
def _row_ll(la, ly, i):
    P = la.shape[1]
    s = 0.0
    out = 0.0
    for j in range(P):
        a = math.exp(la[i, j])
        s += a
        out += -math.lgamma(a) + (a - 1.0) * ly[i, j]
    return out + math.lgamma(s)


@njit
def _vec_ll(x, ly, i):
    P = x.shape[0]
    s = 0.0
    out = 0.0
    for j in range(P):
        a = math.exp(x[j])
        s += a
        out += -math.lgamma(a) + (a - 1.0) * ly[i, j]
    return out + math.lgamma(s)


@njit
def dirichlet_row_loglik_numba(la, ly):
    n = la.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _row_ll(la, ly, i)
    return out


@njit
def sweep_numba(X, W, ly, group, gptr, grows,
                beta, beta_phi, la, u, su, eta, lphi, ll, hyp, upd,
                L_theta, s_theta, L_u, s_u, s_la, s_su,
                z_theta, lu_theta, z_u, lu_u, z_la, lu_la, z_su, lu_su, gam,
                acc_theta, acc_u, acc_la, acc_su):
    n, Q = X.shape
    R = W.shape[1]
    P = ly.shape[1]
    G = u.shape[0]
    D = Q * P + R
    V = hyp[0]
    xi = hyp[1]
    xs = hyp[2]
    xi_rate = hyp[3]
    xs_rate = hyp[4]
    su_mean = hyp[5]

    musum = np.zeros(n)
    for i in range(n):
        for j in range(P):
            musum[i] += _sigmoid(eta[i, j])

    eta_new = np.empty((n, P))
    la_new = np.empty((n, P))
    ll_new = np.empty(n)
    dlphi = np.empty(n)
    delta = np.empty(D)
    row = np.empty(P)

    # ---- coefficient block
    for mode in range(2):
        if upd[mode] == 0:
            continue
        for a in range(D):
            t = 0.0
            for b in range(D):
                t += L_theta[mode, a, b] * z_theta[mode, b]
            delta[a] = s_theta[mode] * t
        dlp = 0.0
        for k in range(Q):
            for j in range(P):
                b0 = beta[k, j]
                dlp -= ((b0 + delta[k * P + j]) ** 2 - b0 * b0) / (2.0 * V)
        for r in range(R):
            b0 = beta_phi[r]
            dlp -= ((b0 + delta[Q * P + r]) ** 2 - b0 * b0) / (2.0 * V)
        for i in range(n):
            dl = 0.0
            for r in range(R):
                dl += W[i, r] * delta[Q * P + r]
            dlphi[i] = dl
            rn = musum[i] - 1.0
            ro = rn
            for j in range(P):
                de = 0.0
                for k in range(Q):
                    de += X[i, k] * delta[k * P + j]
                e_old = eta[i, j]
                e_new = e_old + de
                eta_new[i, j] = e_new
                rn += _sigmoid(e_new) - _sigmoid(e_old)
                shift = _log_sigmoid(e_new) - _log_sigmoid(e_old) + dl
                if mode == 0:
                    d = la[i, j] - _log_sigmoid(e_old) - lphi[i]
                    dlp -= 0.5 * xs * ((d - shift) ** 2 - d * d)
                else:
                    la_new[i, j] = la[i, j] + shift
            dlp -= 0.5 * xi * (rn * rn - ro * ro)
            if mode == 1:
                ll_new[i] = _row_ll(la_new, ly, i)
                dlp += ll_new[i] - ll[i]
        acc = lu_theta[mode] < dlp
        acc_theta[mode] = 1.0 if acc else 0.0
        if acc:
            for k in range(Q):
                for j in range(P):
                    beta[k, j] += delta[k * P + j]
            for r in range(R):
                beta_phi[r] += delta[Q * P + r]
            for i in range(n):
                lphi[i] += dlphi[i]
                for j in range(P):
                    musum[i] += _sigmoid(eta_new[i, j]) - _sigmoid(eta[i, j])
                    eta[i, j] = eta_new[i, j]
                    if mode == 1:
                        la[i, j] = la_new[i, j]
                if mode == 1:
                    ll[i] = ll_new[i]

    # ---- random effects: one P-vector block per group
    du = np.empty(P)
    for mode in range(2):
        if upd[2 + mode] == 0:
            continue
        for g in range(G):
            for j in range(P):
                t = 0.0
                for b in range(P):
                    t += L_u[mode, g, j, b] * z_u[mode, g, b]
                du[j] = s_u[mode] * t
            dlp = 0.0
            for j in range(P):
                dlp -= ((u[g, j] + du[j]) ** 2 - u[g, j] ** 2) / (2.0 * su[j] * su[j])
            for t in range(gptr[g], gptr[g + 1]):
                i = grows[t]
                ro = musum[i] - 1.0
                rn = ro
                for j in range(P):
                    e_old = eta[i, j]
                    e_new = e_old + du[j]
                    rn += _sigmoid(e_new) - _sigmoid(e_old)
                    shift = _log_sigmoid(e_new) - _log_sigmoid(e_old)
                    if mode == 0:
                        d = la[i, j] - _log_sigmoid(e_old) - lphi[i]
                        dlp -= 0.5 * xs * ((d - shift) ** 2 - d * d)
                    else:
                        row[j] = la[i, j] + shift
                dlp -= 0.5 * xi * (rn * rn - ro * ro)
                if mode == 1:
                    dlp += _vec_ll(row, ly, i) - ll[i]
            acc = lu_u[mode, g] < dlp
            acc_u[mode, g] = 1.0 if acc else 0.0
            if acc:
                for j in range(P):
                    u[g, j] += du[j]
                for t in range(gptr[g], gptr[g + 1]):
                    i = grows[t]
                    for j in range(P):
                        e_old = eta[i, j]
                        e_new = e_old + du[j]
                        musum[i] += _sigmoid(e_new) - _sigmoid(e_old)
                        if mode == 1:
                            la[i, j] += _log_sigmoid(e_new) - _log_sigmoid(e_old)
                        eta[i, j] = e_new
                    if mode == 1:
                        ll[i] = _row_ll(la, ly, i)

    # ---- sigma_u: random walk on the log scale
    if upd[4] != 0:
        for j in range(P):
            s_old = su[j]
            s_new = s_old * math.exp(s_su[j] * z_su[j])
            ss = 0.0
            for g in range(G):
                ss += u[g, j] * u[g, j]
            # the log-scale Jacobian cancels one -log(s) of the Normal terms
            f_old = -(G - 1) * math.log(s_old) - ss / (2.0 * s_old * s_old) - s_old / su_mean
            f_new = -(G - 1) * math.log(s_new) - ss / (2.0 * s_new * s_new) - s_new / su_mean
            acc = lu_su[j] < f_new - f_old
            acc_su[j] = 1.0 if acc else 0.0
            if acc:
                su[j] = s_new

    # ---- log_alpha single-site sweep
    if upd[5] != 0:
        for i in range(n):
            for j in range(P):
                row[j] = la[i, j]
            for j in range(P):
                cur = row[j]
                prop = cur + s_la[i, j] * z_la[i, j]
                m = _log_sigmoid(eta[i, j]) + lphi[i]
                row[j] = prop
                lln = _vec_ll(row, ly, i)
                dlp = lln - ll[i] - 0.5 * xs * ((prop - m) ** 2 - (cur - m) ** 2)
                if lu_la[i, j] < dlp:
                    acc_la[i, j] = 1.0
                    la[i, j] = prop
                    ll[i] = lln
                else:
                    acc_la[i, j] = 0.0
                    row[j] = cur

    # ---- precisions of the soft constraint and of the latent layer
    if upd[6] != 0:
        ss = 0.0
        for i in range(n):
            r = musum[i] - 1.0
            ss += r * r
        hyp[1] = gam[0] / (xi_rate + 0.5 * ss)
    if upd[7] != 0:
        ss = 0.0
        for i in range(n):
            for j in range(P):
                d = la[i, j] - _log_sigmoid(eta[i, j]) - lphi[i]
                ss += d * d
        hyp[2] = gam[1] / (xs_rate + 0.5 * ss)

    if upd[8] != 0:
        xs = hyp[2]
        xs_new = xs * math.exp(hyp[6] * gam[2])
        c = math.sqrt(xs / xs_new)
        dlp = math.log(xs_new / xs) - xs_rate * (xs_new - xs)
        for i in range(n):
            for j in range(P):
                m = _log_sigmoid(eta[i, j]) + lphi[i]
                la_new[i, j] = m + c * (la[i, j] - m)
            ll_new[i] = _row_ll(la_new, ly, i)
            dlp += ll_new[i] - ll[i]
        if gam[3] < dlp:
            hyp[7] = 1.0
            hyp[2] = xs_new
            for i in range(n):
                ll[i] = ll_new[i]
                for j in range(P):
                    la[i, j] = la_new[i, j]
        else:
            hyp[7] = 0.0


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def _np_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _np_log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def dirichlet_row_loglik_numpy(la, ly):
    a = np.exp(la)
    return gammaln(a.sum(axis=1)) - gammaln(a).sum(axis=1) + ((a - 1.0) * ly).sum(axis=1)


def sweep_numpy(X, W, ly, group, gptr, grows,
                beta, beta_phi, la, u, su, eta, lphi, ll, hyp, upd,
                L_theta, s_theta, L_u, s_u, s_la, s_su,
                z_theta, lu_theta, z_u, lu_u, z_la, lu_la, z_su, lu_su, gam,
                acc_theta, acc_u, acc_la, acc_su):
    n, Q = X.shape
    P = ly.shape[1]
    G = u.shape[0]
    QP = Q * P
    V, xi, xs, xi_rate, xs_rate, su_mean = hyp[:6]
    mu = _np_sigmoid(eta)
    lmu = _np_log_sigmoid(eta)
    musum = mu.sum(axis=1)

    for mode in range(2):
        if not upd[mode]:
            continue
        delta = s_theta[mode] * (L_theta[mode] @ z_theta[mode])
        db = delta[:QP].reshape(Q, P)
        dp = delta[QP:]
        dlp = -(np.sum((beta + db) ** 2 - beta**2) + np.sum((beta_phi + dp) ** 2 - beta_phi**2)) / (2.0 * V)
        e_new = eta + X @ db
        dl = W @ dp
        m_new = _np_sigmoid(e_new)
        lm_new = _np_log_sigmoid(e_new)
        shift = lm_new - lmu + dl[:, None]
        ro = musum - 1.0
        rn = ro + (m_new - mu).sum(axis=1)
        dlp -= 0.5 * xi * np.sum(rn * rn - ro * ro)
        if mode == 0:
            d = la - lmu - lphi[:, None]
            dlp -= 0.5 * xs * np.sum((d - shift) ** 2 - d * d)
        else:
            la_new = la + shift
            ll_new = dirichlet_row_loglik_numpy(la_new, ly)
            dlp += np.sum(ll_new - ll)
        acc = lu_theta[mode] < dlp
        acc_theta[mode] = float(acc)
        if acc:
            beta += db
            beta_phi += dp
            lphi += dl
            eta[:] = e_new
            mu, lmu = m_new, lm_new
            musum = mu.sum(axis=1)
            if mode == 1:
                la[:] = la_new
                ll[:] = ll_new

    for mode in range(2):
        if not upd[2 + mode] or G == 0:
            continue
        du = s_u[mode] * np.einsum("gjb,gb->gj", L_u[mode], z_u[mode])
        dlp_g = -np.sum(((u + du) ** 2 - u**2) / (2.0 * su[None, :] ** 2), axis=1)
        e_new = eta + du[group]
        m_new = _np_sigmoid(e_new)
        lm_new = _np_log_sigmoid(e_new)
        shift = lm_new - lmu
        ro = musum - 1.0
        rn = ro + (m_new - mu).sum(axis=1)
        rowd = -0.5 * xi * (rn * rn - ro * ro)
        if mode == 0:
            d = la - lmu - lphi[:, None]
            rowd -= 0.5 * xs * np.sum((d - shift) ** 2 - d * d, axis=1)
        else:
            la_new = la + shift
            ll_new = dirichlet_row_loglik_numpy(la_new, ly)
            rowd += ll_new - ll
        dlp_g = dlp_g + np.bincount(group, weights=rowd, minlength=G)
        acc_g = lu_u[mode] < dlp_g
        acc_u[mode] = acc_g
        if acc_g.any():
            u[acc_g] += du[acc_g]
            rows = acc_g[group]
            eta[rows] = e_new[rows]
            mu[rows] = m_new[rows]
            lmu[rows] = lm_new[rows]
            musum = mu.sum(axis=1)
            if mode == 1:
                la[rows] = la_new[rows]
                ll[rows] = ll_new[rows]

    if upd[4] and G > 0:
        s_new = su * np.exp(s_su * z_su)
        ss = np.sum(u * u, axis=0)

        def f(s):
            return -(G - 1) * np.log(s) - ss / (2.0 * s * s) - s / su_mean

        acc = lu_su < f(s_new) - f(su)
        acc_su[:] = acc
        su[acc] = s_new[acc]

    if upd[5]:
        m = lmu + lphi[:, None]
        a = np.exp(la)
        for j in range(P):
            cur = la[:, j].copy()
            prop = cur + s_la[:, j] * z_la[:, j]
            a_prop = np.exp(prop)
            a0_old = a.sum(axis=1)
            a0_new = a0_old - a[:, j] + a_prop
            dll = (gammaln(a0_new) - gammaln(a_prop) + (a_prop - 1.0) * ly[:, j]) - (
                gammaln(a0_old) - gammaln(a[:, j]) + (a[:, j] - 1.0) * ly[:, j]
            )
            dlp = dll - 0.5 * xs * ((prop - m[:, j]) ** 2 - (cur - m[:, j]) ** 2)
            acc = lu_la[:, j] < dlp
            acc_la[:, j] = acc
            la[acc, j] = prop[acc]
            a[acc, j] = a_prop[acc]
        ll[:] = dirichlet_row_loglik_numpy(la, ly)

    if upd[6]:
        r = musum - 1.0
        hyp[1] = gam[0] / (xi_rate + 0.5 * np.sum(r * r))
    if upd[7]:
        d = la - lmu - lphi[:, None]
        hyp[2] = gam[1] / (xs_rate + 0.5 * np.sum(d * d))
    if upd[8]:
        xs = hyp[2]
        xs_new = xs * math.exp(hyp[6] * gam[2])
        m = lmu + lphi[:, None]
        la_new = m + math.sqrt(xs / xs_new) * (la - m)
        ll_new = dirichlet_row_loglik_numpy(la_new, ly)
        dlp = math.log(xs_new / xs) - xs_rate * (xs_new - xs) + np.sum(ll_new - ll)
        if gam[3] < dlp:
            hyp[7] = 1.0
            hyp[2] = xs_new
            la[:] = la_new
            ll[:] = ll_new
        else:
            hyp[7] = 0.0


def get_sweep(backend: str | None = None):
    """Return ``(sweep, row_loglik)`` for ``backend`` ("numba", "numpy" or None)."""
    if backend is None:
        backend = "numba" if HAVE_NUMBA else "numpy"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is disabled or missing")
        return sweep_numba, dirichlet_row_loglik_numba
    if backend == "numpy":
        return sweep_numpy, dirichlet_row_loglik_numpy
    raise ValueError(f"unknown backend {backend!r}")
