"""Adaptive Gauss-Hermite evaluation of the marginal log-likelihood.

Serves as an oracle for the Laplace machinery on models with one grouping
factor and at most two random effects per group.  Per group r the integral

    L_r = int prod_{i in r} p(y_i | x_i beta + m_i^T u) phi_k(u) du

is taken after the change of variables u = u_r + sqrt(2) C_r^{-T} x with u_r
the group's mode and C_r C_r^T the Hessian of the negative log integrand,
so that a Gaussian integrand is integrated exactly.
"""
import math

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import kernels
from .errors import UnsupportedModelError
from .pirls import solve_mode

MAX_DIM = 2


def _grid(n_nodes, k):
    x, w = hermgauss(n_nodes)
    if k == 1:
        return x[:, None], np.log(w)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    W1, W2 = np.meshgrid(np.log(w), np.log(w), indexing="ij")
    return np.c_[X1.ravel(), X2.ravel()], (W1 + W2).ravel()


def gh_loglik(problem, beta, theta, phi=1.0, n_nodes=40):
    """Marginal log-likelihood by adaptive Gauss-Hermite quadrature.

    Parameters
    ----------
    problem : GLMMProblem
        Must have a single grouping factor with at most two random effects.
    beta, theta, phi
        Parameters at which to evaluate.
    n_nodes : int
        Nodes per dimension (tensor grid for two dimensions).

    Returns
    -------
    float
        log L (not -2 log L).
    """
    st = problem.structure
    if not st.single or st.layouts[0].k > MAX_DIM:
        raise UnsupportedModelError("quadrature needs one grouping factor with at most two random effects")
    lay = st.layouts[0]
    k = lay.k
    beta = np.asarray(beta, dtype=float)
    pr = solve_mode(problem, beta, theta, phi)
    m = problem.zl_rows(theta)[0]          # (n, k) rows of Z Lambda
    xb = problem.X @ beta
    y = problem.y
    c_y = problem.c_y(phi)
    code = problem.family.code
    nodes, logw = _grid(n_nodes, k)
    total = 0.0
    U = pr.u_tilde.reshape(-1, k) if pr.u_tilde.size else np.zeros((lay.n_levels, k))
    for r in range(lay.n_levels):
        idx = lay.order[lay.ptr[r]:lay.ptr[r + 1]]
        mr = m[idx]
        ur = U[r]
        w = kernels.point_np(code, xb[idx] + mr @ ur, y[idx], c_y[idx], phi)[1]
        H = np.eye(k) + (mr * w[:, None]).T @ mr
        C = np.linalg.cholesky(H)
        # u = ur + sqrt(2) C^{-T} x
        shift = math.sqrt(2.0) * np.linalg.solve(C.T, nodes.T).T
        u = ur + shift
        eta = xb[idx][None, :] + u @ mr.T
        dev = kernels.point_np(code, eta, y[idx][None, :], c_y[idx][None, :], phi)[2]
        log_f = -0.5 * dev.sum(axis=1) - 0.5 * np.sum(u * u, axis=1) - 0.5 * k * math.log(2.0 * math.pi)
        log_jac = 0.5 * k * math.log(2.0) - float(np.sum(np.log(np.diag(C))))
        total += log_jac + float(logsumexp(logw + np.sum(nodes * nodes, axis=1) + log_f))
    return total


def gh_mle(problem, beta0, theta0, n_nodes=40, xatol=1e-8, fatol=1e-10, maxiter=20000):
    """Maximum likelihood under the quadrature likelihood by Nelder-Mead.

    Only for diagonal templates (theta >= 0 enforced through |theta|);
    returns ``(beta, theta, loglik)``.
    """
    p = problem.p
    start = np.r_[np.asarray(beta0, float), np.asarray(theta0, float)]

    def nll(z):
        try:
            return -gh_loglik(problem, z[:p], np.abs(z[p:]), 1.0, n_nodes)
        except (np.linalg.LinAlgError, ArithmeticError, ValueError):
            return np.inf

    res = minimize(nll, start, method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": maxiter,
                            "adaptive": True})
    # polish from the simplex result
    res = minimize(nll, res.x, method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": maxiter,
                            "adaptive": True})
    return res.x[:p], np.abs(res.x[p:]), -res.fun
