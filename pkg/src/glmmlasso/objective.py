"""Laplace-approximated objective and its beta-derivatives.

f(psi) = sum_i -2 loglik_i(mu_i) + log|(Z Lambda)^T W (Z Lambda) + I| + |u~|^2
Q_LA(psi) = f(psi) + lambda * sum_{k penalized} |beta_k|

with every term evaluated at the random-effects mode u~(psi).  The
"fixed-mode" variants hold u~ constant while beta moves (W is re-evaluated at
the moved linear predictor).
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .errors import NumericalError
from .pirls import FD_GRAD_TOL, _system, leverages, solve_mode

H_MIN = 1e-5
H_MAX = 1e5


@dataclass
class ObjectiveValue:
    q_la: float
    f: float
    neg2_cond_loglik: float
    logdet: float
    u_norm2: float
    penalty: float


def penalty_value(beta, mask, lam):
    return float(lam) * float(np.sum(np.abs(np.asarray(beta)[mask]))) if lam else 0.0


def objective_from_mode(pr, beta, mask, lam):
    f = pr.deviance + pr.logdet + pr.u_norm2
    pen = penalty_value(beta, mask, lam)
    if not np.isfinite(f):
        raise NumericalError("non-finite Laplace objective")
    return ObjectiveValue(f + pen, f, pr.deviance, pr.logdet, pr.u_norm2, pen)


def q_la(problem, beta, theta, phi, lam=0.0, u_warm=None, xb=None, mask=None):
    """Evaluate Q_LA at (beta, theta, phi); returns ``(ObjectiveValue, PirlsResult)``."""
    pr = solve_mode(problem, beta, theta, phi, u_start=u_warm, xb=xb)
    mask = problem.penalty_mask if mask is None else mask
    return objective_from_mode(pr, beta, mask, lam), pr


def fixed_u_terms(problem, eta, theta, phi):
    """(deviance, logdet) at linear predictor ``eta`` with the mode frozen."""
    if problem.q == 0:
        dev = kernels.point_np(problem.family.code, eta, problem.y, problem.c_y(phi), phi)[2]
        return float(dev.sum()), 0.0
    if problem.structure.single:
        lay = problem.structure.layouts[0]
        return kernels.fixed_u_terms(problem.family.code, eta, problem.y, problem.c_y(phi), float(phi),
                                     lay.order, lay.ptr, problem.zl_rows(theta)[0])
    _mu, w, dev = kernels.point_np(problem.family.code, eta, problem.y, problem.c_y(phi), phi)
    try:
        C = cho_factor(_system(problem.zl_matrix(theta), w, problem.q), lower=True)[0]
    except np.linalg.LinAlgError:
        return float(dev.sum()), np.nan
    return float(dev.sum()), 2.0 * float(np.sum(np.log(np.diag(C))))


def f_fixed_u(problem, beta, theta, phi, u_tilde):
    """f(beta, theta, phi | u~) with W evaluated at the moved beta."""
    eta = problem.X @ np.asarray(beta, dtype=float) + problem.zl_matrix(theta) @ u_tilde
    dev, logdet = fixed_u_terms(problem, eta, theta, phi)
    return dev + logdet + float(u_tilde @ u_tilde)


def _dw_deta(code, mu, phi):
    if code == 0:
        return mu * (1.0 - mu) * (1.0 - 2.0 * mu)
    if code == 1:
        return mu
    return np.zeros_like(mu)


def score_vector(problem, pr, phi, theta=None, logdet=False, implicit=False):
    """Per-observation weights r with d f / d beta = X^T r at the mode ``pr``.

    The deviance part is -(2/phi)(y - mu) for canonical links.  ``logdet``
    adds the derivative of the log-determinant through W with the mode held
    fixed, W'_i h_i with h the leverages of Z Lambda.  ``implicit`` also
    adds the part carried by the mode's dependence on beta: at the mode the
    deviance and |u|^2 terms are stationary in u, and differentiating the
    mode equation gives du~/dbeta = -H^{-1} (Z Lambda)^T W X with
    H = (Z Lambda)^T W (Z Lambda) + I, so the extra term is
    -W (Z Lambda) H^{-1} (Z Lambda)^T (W' h).
    """
    r = -(2.0 / phi) * (problem.y - pr.mu)
    if not (logdet or implicit) or not problem.q:
        return r
    W = np.ascontiguousarray(pr.W)
    if problem.structure.single:
        lay = problem.structure.layouts[0]
        return r + kernels.logdet_score_block(problem.family.code, np.ascontiguousarray(pr.mu), W,
                                              lay.order, lay.ptr, problem.zl_rows(theta)[0], bool(implicit))
    c = _dw_deta(problem.family.code, pr.mu, phi) * leverages(problem, theta, W)
    if implicit:
        M = problem.zl_matrix(theta)
        C = cho_factor(_system(M, W, problem.q), lower=True)
        c = c - W * (M @ cho_solve(C, M.T @ c))
    return r + c


def grad_fixed_u_all(problem, pr, phi, theta=None, logdet_in_grad=False):
    """d f(. | u~) / d beta for every coordinate (see :func:`score_vector`)."""
    return problem.X.T @ score_vector(problem, pr, phi, theta, logdet=logdet_in_grad)


def grad_implicit_all(problem, pr, phi, theta):
    """d f / d beta including the mode's dependence on beta, in closed form.

    Agrees with :func:`grad_beta_exact` up to its finite-difference error.
    """
    return problem.X.T @ score_vector(problem, pr, phi, theta, logdet=True, implicit=True)


def grad_beta_fixed_u(k, problem, pr, phi, theta=None, logdet_in_grad=False):
    xk = problem.X[:, k]
    g = -(2.0 / phi) * float(xk @ (problem.y - pr.mu))
    if logdet_in_grad and problem.q:
        h = leverages(problem, theta, pr.W)
        g += float(xk @ (_dw_deta(problem.family.code, pr.mu, phi) * h))
    return g


def fd_step(beta_k):
    return 1e-5 * (1.0 + abs(beta_k))


def grad_beta_exact(k, problem, beta, theta, phi, u_warm=None, xb=None):
    """d f / d beta_k including the dependence of u~ and W on beta_k.

    Central difference with step 1e-5 (1 + |beta_k|); both PIRLS solves are
    warm-started from ``u_warm``.
    """
    beta = np.asarray(beta, dtype=float)
    if xb is None:
        xb = problem.X @ beta
    h = fd_step(beta[k])
    xk = problem.X[:, k]
    vals = []
    for s in (h, -h):
        pr = solve_mode(problem, None, theta, phi, u_start=u_warm, xb=xb + s * xk, grad_tol=FD_GRAD_TOL)
        vals.append(pr.deviance + pr.logdet + pr.u_norm2)
    return (vals[0] - vals[1]) / (2.0 * h)


def grad_exact_all(problem, beta, theta, phi, u_warm=None):
    xb = problem.X @ np.asarray(beta, dtype=float)
    return np.array([grad_beta_exact(k, problem, beta, theta, phi, u_warm, xb) for k in range(problem.p)])


def hessian_diag(k, problem, pr, phi=1.0):
    """Fisher-information diagonal of the deviance term, clamped to [1e-5, 1e5]."""
    xk = problem.X[:, k]
    return float(np.clip(2.0 * float((xk * xk) @ pr.W), H_MIN, H_MAX))


def hessian_diag_all(problem, pr):
    return np.clip(2.0 * ((problem.X * problem.X).T @ pr.W), H_MIN, H_MAX)
