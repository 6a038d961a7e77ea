"""Random-effects mode by penalized iteratively reweighted least squares.

Minimises S(u) = -sum_i [(y_i xi_i - b(xi_i))/phi + c(y_i, phi)] + |u|^2 / 2,
which is convex in u.  Each iteration solves

    ((Z Lambda)^T W (Z Lambda) + I) u_new = (Z Lambda)^T W z,
    z = Z Lambda u + g'(mu) (y - mu),

which for canonical links is the Newton step on S.  A step that increases S
is halved (up to 20 times).  With one grouping factor the system is block
diagonal and handled by :func:`glmmlasso.kernels.pirls_block`; otherwise a
dense Cholesky of the q x q system is used.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .errors import ConvergenceError, NumericalError

MAX_ITER = 100
ETA_TOL = 1e-8
# relative to 1 + |u|_inf.  Newton converges quadratically, so the tight value
# costs at most one extra step and keeps objective values accurate to
# rounding level (line searches compare differences of order 1e-12)
GRAD_TOL = 1e-13
FD_GRAD_TOL = GRAD_TOL
LOOSE_GRAD_TOL = 1e-6  # accepted together with the relative eta change rule


@dataclass
class PirlsResult:
    u_tilde: np.ndarray
    W: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    iterations: int
    converged: bool
    deviance: float      # sum_i -2 loglik_i at the mode
    logdet: float        # log |(Z Lambda)^T W (Z Lambda) + I| at the mode
    grad_norm: float
    xb: np.ndarray

    @property
    def u_norm2(self):
        return float(self.u_tilde @ self.u_tilde)

    @property
    def s_value(self):
        return 0.5 * self.deviance + 0.5 * self.u_norm2


def solve_mode(problem, beta, theta, phi=1.0, u_start=None, xb=None, max_iter=MAX_ITER,
               grad_tol=GRAD_TOL, raise_on_failure=True):
    """Mode of the random effects at (beta, theta, phi).

    ``xb`` may pass a precomputed ``X @ beta``.  Raises
    :class:`ConvergenceError` (carrying the last :class:`PirlsResult`) when
    the iteration budget runs out, :class:`NumericalError` on non-finite
    values.
    """
    if xb is None:
        xb = problem.X @ np.asarray(beta, dtype=float)
    u0 = np.zeros(problem.q) if u_start is None else np.asarray(u_start, dtype=float)
    if problem.q == 0:
        mu, w, dev_i = kernels.point_np(problem.family.code, xb, problem.y, problem.c_y(phi), phi)
        return PirlsResult(u0, w, mu, xb.copy(), 0, True, float(dev_i.sum()), 0.0, 0.0, xb)
    if problem.structure.single:
        lay = problem.structure.layouts[0]
        m = problem.zl_rows(theta)[0]
        out = kernels.pirls_block(problem.family.code, xb, problem.y, problem.c_y(phi), float(phi),
                                  lay.order, lay.ptr, m, np.ascontiguousarray(u0),
                                  max_iter, ETA_TOL, grad_tol, LOOSE_GRAD_TOL)
        u, eta, mu, w, dev, logdet, it, status, gnorm = out
    else:
        u, eta, mu, w, dev, logdet, it, status, gnorm = _pirls_dense(
            problem, xb, theta, phi, u0, max_iter, grad_tol)
    res = PirlsResult(u, w, mu, eta, int(it), status == kernels.CONVERGED, float(dev), float(logdet),
                      float(gnorm), xb)
    if status == kernels.NONFINITE or not np.isfinite(res.deviance + res.logdet):
        raise NumericalError("PIRLS produced non-finite values")
    if status == kernels.MAX_ITER and raise_on_failure:
        raise ConvergenceError(f"PIRLS did not converge in {max_iter} iterations", res)
    return res


def _pirls_dense(problem, xb, theta, phi, u, max_iter, grad_tol):
    code = problem.family.code
    y, c_y = problem.y, problem.c_y(phi)
    M = problem.zl_matrix(theta)
    q = problem.q
    u = u.copy()
    eta = xb + M @ u
    it, status, gnorm, gnorm_old = 0, kernels.CONVERGED, 0.0, np.inf
    while True:
        mu, w, dev_i = kernels.point_np(code, eta, y, c_y, phi)
        grad = u - M.T @ ((y - mu) / phi)
        gnorm = float(np.max(np.abs(grad)))
        if not np.isfinite(gnorm):
            status = kernels.NONFINITE
            break
        if gnorm <= grad_tol * (1.0 + np.max(np.abs(u))):
            break
        if it > 0 and gnorm <= LOOSE_GRAD_TOL and (
                np.linalg.norm(eta - eta_old) <= ETA_TOL * np.linalg.norm(eta_old)
                or gnorm > kernels.STALL_RATIO * gnorm_old):
            break
        gnorm_old = gnorm
        if it >= max_iter:
            status = kernels.MAX_ITER
            break
        eta_old = eta
        H = _system(M, w, q)
        try:
            step = cho_solve(cho_factor(H, lower=True), grad)
        except np.linalg.LinAlgError:
            status = kernels.NONFINITE
            break
        s_old = 0.5 * dev_i.sum() + 0.5 * u @ u
        t = 1.0
        for h in range(kernels.MAX_HALVINGS + 1):
            uc = u - t * step
            ec = xb + M @ uc
            s_new = 0.5 * kernels.point_np(code, ec, y, c_y, phi)[2].sum() + 0.5 * uc @ uc
            if s_new <= s_old + kernels.S_SLACK * (1.0 + abs(s_old)):
                break
            if h == kernels.MAX_HALVINGS:
                uc, ec = u, eta
                break
            t *= 0.5
        u, eta = uc, ec
        it += 1
    mu, w, dev_i = kernels.point_np(code, eta, y, c_y, phi)
    try:
        C = cho_factor(_system(M, w, q), lower=True)[0]
        logdet = 2.0 * float(np.sum(np.log(np.diag(C))))
    except np.linalg.LinAlgError:
        status, logdet = kernels.NONFINITE, np.nan
    return u, eta, mu, w, float(dev_i.sum()), logdet, it, status, gnorm


def _system(M, w, q):
    """Dense (Z Lambda)^T W (Z Lambda) + I."""
    H = (M.T @ M.multiply(w[:, None])).toarray()
    H[np.diag_indices(q)] += 1.0
    return H


def s_value(problem, u, beta, theta, phi=1.0):
    """S(u) at an arbitrary u."""
    eta = problem.X @ np.asarray(beta, dtype=float) + problem.zl_matrix(theta) @ u
    dev = kernels.point_np(problem.family.code, eta, problem.y, problem.c_y(phi), phi)[2]
    return 0.5 * float(dev.sum()) + 0.5 * float(u @ u)


def s_grad(problem, u, beta, theta, phi=1.0):
    """S'(u) = -(Z Lambda)^T B (y - mu) + u with B = I / phi for canonical links."""
    M = problem.zl_matrix(theta)
    eta = problem.X @ np.asarray(beta, dtype=float) + M @ u
    mu = kernels.point_np(problem.family.code, eta, problem.y, problem.c_y(phi), phi)[0]
    return -(M.T @ ((problem.y - mu) / phi)) + u


def system_matrix(problem, theta, W):
    """Dense S''(u) = (Z Lambda)^T W (Z Lambda) + I for diagnostics and tests."""
    return _system(problem.zl_matrix(theta), np.asarray(W), problem.q)


def leverages(problem, theta, W):
    """diag(Z Lambda S''^{-1} (Z Lambda)^T), used by the log-determinant gradient."""
    if problem.structure.single:
        lay = problem.structure.layouts[0]
        return kernels.leverage_block(np.ascontiguousarray(W), lay.order, lay.ptr, problem.zl_rows(theta)[0])
    M = problem.zl_matrix(theta)
    C = cho_factor(_system(M, W, problem.q), lower=True)
    Md = M.toarray()
    return np.einsum("ij,ji->i", Md, cho_solve(C, Md.T))
