"""Hot numerical kernels.

Each kernel exists twice: a numba-compiled loop (``*_nb``) and a vectorised
numpy twin (``*_np``).  The public name dispatches on
:func:`glmmlasso._accel.numba_enabled`.  Both variants implement the same
arithmetic and agree to rounding error; ``benchmarks/bench_kernels.py``
times them against each other.

Block layout (single grouping factor): observations sorted by group are
``order[ptr[r]:ptr[r + 1]]``; ``m[i] = Lambda_loc^T z_i`` is row ``i`` of
``Z Lambda`` restricted to the ``k`` columns of its group, and the random
effects are stored group-major, ``u[r * k:(r + 1) * k]``.
"""
import math

import numpy as np
from scipy.special import expit

from ._accel import njit, numba_enabled

ETA_CLAMP = 30.0
MAX_HALVINGS = 20
# relative slack in the PIRLS decrease test; near the mode the true decrease
# is below the rounding error of summing S
S_SLACK = 1e-13
# once the gradient is small, a Newton step that fails to shrink it by this
# factor means the rounding floor has been reached
STALL_RATIO = 0.25

# PIRLS status codes
CONVERGED, MAX_ITER, NONFINITE = 0, 1, 2


# ---------------------------------------------------------------------------
# pointwise family evaluation (codes: 0 bernoulli, 1 poisson, 2 gaussian)
# ---------------------------------------------------------------------------

@njit(inline="always")
def _point(code, eta, y, c_y, phi):
    """Return (mu, W_i, -2 loglik_i) at linear predictor ``eta``."""
    if code == 0:
        e = min(max(eta, -ETA_CLAMP), ETA_CLAMP)
        if e >= 0:
            z = math.exp(-e)
            mu = 1.0 / (1.0 + z)
            b = e + math.log1p(z)
        else:
            z = math.exp(e)
            mu = z / (1.0 + z)
            b = math.log1p(z)
        return mu, mu * (1.0 - mu), -2.0 * (y * e - b)
    elif code == 1:
        e = min(max(eta, -ETA_CLAMP), ETA_CLAMP)
        mu = math.exp(e)
        return mu, mu, -2.0 * (y * e - mu + c_y)
    else:
        return eta, 1.0 / phi, -2.0 * ((y * eta - 0.5 * eta * eta) / phi + c_y)


def point_np(code, eta, y, c_y, phi):
    if code == 0:
        e = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        mu = expit(e)
        return mu, mu * (1.0 - mu), -2.0 * (y * e - np.logaddexp(0.0, e))
    if code == 1:
        e = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        mu = np.exp(e)
        return mu, mu, -2.0 * (y * e - mu + c_y)
    return eta + 0.0, np.full_like(eta, 1.0 / phi), -2.0 * ((y * eta - 0.5 * eta * eta) / phi + c_y)


# ---------------------------------------------------------------------------
# small dense helpers (k is the per-group random-effect dimension, k <= ~10)
# ---------------------------------------------------------------------------

@njit(inline="always")
def _chol(A, k):
    """In-place lower Cholesky of the leading k x k block; returns logdet or nan."""
    logdet = 0.0
    for j in range(k):
        s = A[j, j]
        for t in range(j):
            s -= A[j, t] * A[j, t]
        if s <= 0.0:
            return np.nan
        d = math.sqrt(s)
        A[j, j] = d
        logdet += 2.0 * math.log(d)
        for i in range(j + 1, k):
            s = A[i, j]
            for t in range(j):
                s -= A[i, t] * A[j, t]
            A[i, j] = s / d
    return logdet


@njit(inline="always")
def _chol_solve(C, b, out, k):
    for i in range(k):
        s = b[i]
        for t in range(i):
            s -= C[i, t] * out[t]
        out[i] = s / C[i, i]
    for i in range(k - 1, -1, -1):
        s = out[i]
        for t in range(i + 1, k):
            s -= C[t, i] * out[t]
        out[i] = s / C[i, i]


# ---------------------------------------------------------------------------
# PIRLS for one grouping factor
# ---------------------------------------------------------------------------

@njit
def pirls_block_nb(code, xb, y, c_y, phi, order, ptr, m, u0,
                   max_iter, eta_tol, grad_tol, loose_grad_tol):
    n = xb.shape[0]
    k = m.shape[1]
    N = ptr.shape[0] - 1
    u = u0.copy()
    eta = np.empty(n)
    eta_old = np.empty(n)
    mu = np.empty(n)
    w = np.empty(n)
    dev_i = np.empty(n)
    grad = np.zeros(N * k)
    A = np.empty((k, k))
    step = np.empty(k)
    ucand = np.empty(k)

    for r in range(N):
        for jj in range(ptr[r], ptr[r + 1]):
            i = order[jj]
            s = xb[i]
            for a in range(k):
                s += m[i, a] * u[r * k + a]
            eta[i] = s

    # trial-point values of the damped step, reused once the step is accepted
    mu_t = np.empty(n)
    w_t = np.empty(n)
    d_t = np.empty(n)
    it = 0
    status = CONVERGED
    gnorm = 0.0
    gnorm_old = np.inf
    fresh = False  # mu, w, dev_i already evaluated at eta
    while True:
        unorm = 0.0
        gnorm = 0.0
        for r in range(N):
            for a in range(k):
                grad[r * k + a] = u[r * k + a]
                if abs(u[r * k + a]) > unorm:
                    unorm = abs(u[r * k + a])
            for jj in range(ptr[r], ptr[r + 1]):
                i = order[jj]
                if not fresh:
                    mu_i, w_i, d_i = _point(code, eta[i], y[i], c_y[i], phi)
                    mu[i] = mu_i
                    w[i] = w_i
                    dev_i[i] = d_i
                res = (y[i] - mu[i]) / phi
                for a in range(k):
                    grad[r * k + a] -= m[i, a] * res
        for t in range(N * k):
            if abs(grad[t]) > gnorm:
                gnorm = abs(grad[t])
        if not math.isfinite(gnorm):
            status = NONFINITE
            break
        if gnorm <= grad_tol * (1.0 + unorm):
            break
        if it > 0:
            num = 0.0
            den = 0.0
            for i in range(n):
                num += (eta[i] - eta_old[i]) ** 2
                den += eta_old[i] ** 2
            if math.sqrt(num) <= eta_tol * math.sqrt(den) and gnorm <= loose_grad_tol:
                break
            if gnorm <= loose_grad_tol and gnorm > STALL_RATIO * gnorm_old:
                break
        gnorm_old = gnorm
        if it >= max_iter:
            status = MAX_ITER
            break
        # damped Newton step per group; S is separable across groups
        for r in range(N):
            for a in range(k):
                for b in range(k):
                    A[a, b] = 1.0 if a == b else 0.0
            s_old = 0.0
            for jj in range(ptr[r], ptr[r + 1]):
                i = order[jj]
                s_old += 0.5 * dev_i[i]
                for a in range(k):
                    for b in range(a + 1):
                        A[a, b] += w[i] * m[i, a] * m[i, b]
            for a in range(k):
                s_old += 0.5 * u[r * k + a] ** 2
            ld = _chol(A, k)
            if not math.isfinite(ld):
                status = NONFINITE
                break
            _chol_solve(A, grad[r * k:(r + 1) * k], step, k)
            t = 1.0
            accepted = False
            for _h in range(MAX_HALVINGS + 1):
                s_new = 0.0
                for a in range(k):
                    ucand[a] = u[r * k + a] - t * step[a]
                for jj in range(ptr[r], ptr[r + 1]):
                    i = order[jj]
                    e = xb[i]
                    for a in range(k):
                        e += m[i, a] * ucand[a]
                    mu_i, w_i, d_i = _point(code, e, y[i], c_y[i], phi)
                    mu_t[i] = mu_i
                    w_t[i] = w_i
                    d_t[i] = d_i
                    eta_old[i] = e
                    s_new += 0.5 * d_i
                for a in range(k):
                    s_new += 0.5 * ucand[a] ** 2
                if s_new <= s_old + S_SLACK * (1.0 + abs(s_old)):
                    accepted = True
                    break
                if _h == MAX_HALVINGS:
                    break
                t *= 0.5
            if accepted:
                for a in range(k):
                    u[r * k + a] = ucand[a]
                for jj in range(ptr[r], ptr[r + 1]):
                    i = order[jj]
                    # eta_old holds the trial eta here; swap it in below
                    e = eta[i]
                    eta[i] = eta_old[i]
                    eta_old[i] = e
                    mu[i] = mu_t[i]
                    w[i] = w_t[i]
                    dev_i[i] = d_t[i]
            else:
                for jj in range(ptr[r], ptr[r + 1]):
                    i = order[jj]
                    eta_old[i] = eta[i]
        if status != CONVERGED:
            break
        fresh = True
        it += 1

    # Laplace terms at the final iterate
    logdet = 0.0
    dev = 0.0
    for r in range(N):
        for a in range(k):
            for b in range(k):
                A[a, b] = 1.0 if a == b else 0.0
        for jj in range(ptr[r], ptr[r + 1]):
            i = order[jj]
            if not fresh:
                mu_i, w_i, d_i = _point(code, eta[i], y[i], c_y[i], phi)
                mu[i] = mu_i
                w[i] = w_i
                dev_i[i] = d_i
            dev += dev_i[i]
            for a in range(k):
                for b in range(a + 1):
                    A[a, b] += w[i] * m[i, a] * m[i, b]
        ld = _chol(A, k)
        if not math.isfinite(ld):
            status = NONFINITE
        logdet += ld
    return u, eta, mu, w, dev, logdet, it, status, gnorm


def _group_gram_np(w, m, ptr, order):
    """Per-group I + sum_i w_i m_i m_i^T, shape (N, k, k)."""
    k = m.shape[1]
    ms = m[order]
    outer = (w[order][:, None, None] * ms[:, :, None]) * ms[:, None, :]
    A = np.add.reduceat(outer, ptr[:-1], axis=0)
    A += np.eye(k)
    return A


def _group_sum_np(v, ptr, order):
    return np.add.reduceat(v[order], ptr[:-1], axis=0)


def pirls_block_np(code, xb, y, c_y, phi, order, ptr, m, u0,
                   max_iter, eta_tol, grad_tol, loose_grad_tol):
    k = m.shape[1]
    N = ptr.shape[0] - 1
    lev = np.empty(xb.shape[0], dtype=np.int64)
    lev[order] = np.repeat(np.arange(N), np.diff(ptr))
    U = u0.reshape(N, k).copy()

    def eta_of(U):
        return xb + np.einsum("ij,ij->i", m, U[lev])

    eta = eta_of(U)
    it = 0
    status = CONVERGED
    gnorm_old = np.inf
    while True:
        mu, w, dev_i = point_np(code, eta, y, c_y, phi)
        G = U - _group_sum_np(m * ((y - mu) / phi)[:, None], ptr, order)
        gnorm = float(np.max(np.abs(G))) if G.size else 0.0
        if not np.isfinite(gnorm):
            status = NONFINITE
            break
        if gnorm <= grad_tol * (1.0 + (np.max(np.abs(U)) if U.size else 0.0)):
            break
        if it > 0:
            num = np.linalg.norm(eta - eta_old)
            if num <= eta_tol * np.linalg.norm(eta_old) and gnorm <= loose_grad_tol:
                break
            if gnorm <= loose_grad_tol and gnorm > STALL_RATIO * gnorm_old:
                break
        gnorm_old = gnorm
        if it >= max_iter:
            status = MAX_ITER
            break
        eta_old = eta
        A = _group_gram_np(w, m, ptr, order)
        try:
            step = np.linalg.solve(A, G[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            status = NONFINITE
            break
        s_old = 0.5 * _group_sum_np(dev_i, ptr, order) + 0.5 * np.sum(U * U, axis=1)
        t = np.ones(N)
        for h in range(MAX_HALVINGS + 1):
            Uc = U - t[:, None] * step
            ec = eta_of(Uc)
            s_new = 0.5 * _group_sum_np(point_np(code, ec, y, c_y, phi)[2], ptr, order) \
                + 0.5 * np.sum(Uc * Uc, axis=1)
            bad = s_new > s_old + S_SLACK * (1.0 + np.abs(s_old))
            if not bad.any():
                break
            if h == MAX_HALVINGS:
                Uc = np.where(bad[:, None], U, Uc)
                ec = eta_of(Uc)
                break
            t = np.where(bad, 0.5 * t, t)
        U = Uc
        eta = ec
        it += 1

    mu, w, dev_i = point_np(code, eta, y, c_y, phi)
    A = _group_gram_np(w, m, ptr, order)
    try:
        C = np.linalg.cholesky(A)
        logdet = float(2.0 * np.sum(np.log(np.diagonal(C, axis1=1, axis2=2))))
    except np.linalg.LinAlgError:
        status = NONFINITE
        logdet = np.nan
    return U.ravel(), eta, mu, w, float(dev_i.sum()), logdet, it, status, gnorm


def pirls_block(*args):
    if numba_enabled():
        return pirls_block_nb(*args)
    return pirls_block_np(*args)


# ---------------------------------------------------------------------------
# deviance + log-determinant at a given linear predictor (mode held fixed)
# ---------------------------------------------------------------------------

@njit
def fixed_u_terms_nb(code, eta, y, c_y, phi, order, ptr, m):
    k = m.shape[1]
    N = ptr.shape[0] - 1
    A = np.empty((k, k))
    dev = 0.0
    logdet = 0.0
    for r in range(N):
        for a in range(k):
            for b in range(k):
                A[a, b] = 1.0 if a == b else 0.0
        for jj in range(ptr[r], ptr[r + 1]):
            i = order[jj]
            _mu, w_i, d_i = _point(code, eta[i], y[i], c_y[i], phi)
            dev += d_i
            for a in range(k):
                for b in range(a + 1):
                    A[a, b] += w_i * m[i, a] * m[i, b]
        logdet += _chol(A, k)
    return dev, logdet


def fixed_u_terms_np(code, eta, y, c_y, phi, order, ptr, m):
    _mu, w, dev_i = point_np(code, eta, y, c_y, phi)
    A = _group_gram_np(w, m, ptr, order)
    sign, ld = np.linalg.slogdet(A)
    logdet = float(np.sum(ld)) if np.all(sign > 0) else np.nan
    return float(dev_i.sum()), logdet


def fixed_u_terms(*args):
    if numba_enabled():
        return fixed_u_terms_nb(*args)
    return fixed_u_terms_np(*args)


@njit
def leverage_block_nb(w, order, ptr, m):
    """h_i = m_i^T (I + sum_r w m m^T)^{-1} m_i for every observation."""
    n, k = m.shape
    N = ptr.shape[0] - 1
    A = np.empty((k, k))
    out = np.empty(n)
    tmp = np.empty(k)
    for r in range(N):
        for a in range(k):
            for b in range(k):
                A[a, b] = 1.0 if a == b else 0.0
        for jj in range(ptr[r], ptr[r + 1]):
            i = order[jj]
            for a in range(k):
                for b in range(a + 1):
                    A[a, b] += w[i] * m[i, a] * m[i, b]
        _chol(A, k)
        for jj in range(ptr[r], ptr[r + 1]):
            i = order[jj]
            _chol_solve(A, m[i], tmp, k)
            s = 0.0
            for a in range(k):
                s += m[i, a] * tmp[a]
            out[i] = s
    return out


def leverage_block_np(w, order, ptr, m):
    N = ptr.shape[0] - 1
    lev = np.empty(m.shape[0], dtype=np.int64)
    lev[order] = np.repeat(np.arange(N), np.diff(ptr))
    Ainv = np.linalg.inv(_group_gram_np(w, m, ptr, order))
    return np.einsum("ia,iab,ib->i", m, Ainv[lev], m)


def leverage_block(*args):
    if numba_enabled():
        return leverage_block_nb(*args)
    return leverage_block_np(*args)


@njit(inline="always")
def _dw(code, mu):
    """dW/d eta for the canonical links (phi = 1 families)."""
    if code == 0:
        return mu * (1.0 - mu) * (1.0 - 2.0 * mu)
    if code == 1:
        return mu
    return 0.0


@njit
def logdet_score_block_nb(code, mu, w, order, ptr, m, implicit):
    """Per-observation weights s with d logdet / d beta = X^T s.

    s_i = W'_i h_i holding the mode fixed; with ``implicit`` the term
    -W_i m_i^T A^{-1} sum_j m_j W'_j h_j carried by the mode's own movement
    is added (A the group's I + sum w m m^T).
    """
    n, k = m.shape
    N = ptr.shape[0] - 1
    A = np.empty((k, k))
    out = np.empty(n)
    tmp = np.empty(k)
    acc = np.empty(k)
    for r in range(N):
        for a in range(k):
            acc[a] = 0.0
            for b in range(k):
                A[a, b] = 1.0 if a == b else 0.0
        for jj in range(ptr[r], ptr[r + 1]):
            i = order[jj]
            for a in range(k):
                for b in range(a + 1):
                    A[a, b] += w[i] * m[i, a] * m[i, b]
        _chol(A, k)
        for jj in range(ptr[r], ptr[r + 1]):
            i = order[jj]
            _chol_solve(A, m[i], tmp, k)
            h = 0.0
            for a in range(k):
                h += m[i, a] * tmp[a]
            c = _dw(code, mu[i]) * h
            out[i] = c
            for a in range(k):
                acc[a] += c * m[i, a]
        if implicit:
            _chol_solve(A, acc, tmp, k)
            for jj in range(ptr[r], ptr[r + 1]):
                i = order[jj]
                t = 0.0
                for a in range(k):
                    t += m[i, a] * tmp[a]
                out[i] -= w[i] * t
    return out


def logdet_score_block_np(code, mu, w, order, ptr, m, implicit):
    N = ptr.shape[0] - 1
    grp = np.empty(m.shape[0], dtype=np.int64)
    grp[order] = np.repeat(np.arange(N), np.diff(ptr))
    A = _group_gram_np(w, m, ptr, order)
    Ainv = np.linalg.inv(A)
    h = np.einsum("ia,iab,ib->i", m, Ainv[grp], m)
    if code == 0:
        c = mu * (1.0 - mu) * (1.0 - 2.0 * mu) * h
    elif code == 1:
        c = mu * h
    else:
        c = np.zeros_like(h)
    if not implicit:
        return c
    v = np.einsum("rab,rb->ra", Ainv, _group_sum_np(c[:, None] * m, ptr, order))
    return c - w * np.einsum("ia,ia->i", m, v[grp])


def logdet_score_block(*args):
    if numba_enabled():
        return logdet_score_block_nb(*args)
    return logdet_score_block_np(*args)


# ---------------------------------------------------------------------------
# weighted least squares lasso by cyclic coordinate descent (GLM warm start)
# ---------------------------------------------------------------------------

@njit
def wls_lasso_cd_nb(X, w, z, beta, pen, max_sweeps, tol):
    """Minimise sum_i w_i (z_i - x_i beta)^2 + sum_k pen_k |beta_k| in place.

    Returns the number of sweeps used.
    """
    n, p = X.shape
    r = z - X @ beta
    a = np.empty(p)
    for k in range(p):
        s = 0.0
        for i in range(n):
            s += w[i] * X[i, k] * X[i, k]
        a[k] = s
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        maxdelta = 0.0
        for k in range(p):
            if a[k] <= 0.0:
                continue
            c = 0.0
            for i in range(n):
                c += w[i] * X[i, k] * r[i]
            c += a[k] * beta[k]
            thr = 0.5 * pen[k]
            if c > thr:
                new = (c - thr) / a[k]
            elif c < -thr:
                new = (c + thr) / a[k]
            else:
                new = 0.0
            delta = new - beta[k]
            if delta != 0.0:
                for i in range(n):
                    r[i] -= delta * X[i, k]
                beta[k] = new
                if abs(delta) * math.sqrt(a[k]) > maxdelta:
                    maxdelta = abs(delta) * math.sqrt(a[k])
        if maxdelta <= tol:
            break
    return sweeps


def wls_lasso_cd_np(X, w, z, beta, pen, max_sweeps, tol):
    r = z - X @ beta
    a = np.einsum("i,ik,ik->k", w, X, X)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        maxdelta = 0.0
        for k in range(X.shape[1]):
            if a[k] <= 0.0:
                continue
            xk = X[:, k]
            c = float(np.dot(w * xk, r)) + a[k] * beta[k]
            thr = 0.5 * pen[k]
            new = np.sign(c) * max(abs(c) - thr, 0.0) / a[k]
            delta = new - beta[k]
            if delta != 0.0:
                r -= delta * xk
                beta[k] = new
                maxdelta = max(maxdelta, abs(delta) * math.sqrt(a[k]))
        if maxdelta <= tol:
            break
    return sweeps


def wls_lasso_cd(X, w, z, beta, pen, max_sweeps, tol):
    if numba_enabled():
        return wls_lasso_cd_nb(X, w, z, beta, pen, max_sweeps, tol)
    return wls_lasso_cd_np(X, w, z, beta, pen, max_sweeps, tol)
