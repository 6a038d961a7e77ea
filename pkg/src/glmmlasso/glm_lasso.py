"""Lasso-penalized GLM without random effects.

Minimises -2 loglik(beta) + lam * sum_{k penalized} |beta_k| by IRLS outer
iterations around a weighted least-squares coordinate descent.  Used to
build starting values for the mixed-model fit and as the ``glm_lasso``
baseline of the simulation studies.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidInputError

MAX_IRLS = 50
CD_SWEEPS = 2000
CD_TOL = 1e-10
IRLS_TOL = 1e-10
ZERO_TOL = 1e-10


@dataclass
class GLMLassoFit:
    beta: np.ndarray
    lam: float
    neg2_loglik: float
    iterations: int
    converged: bool

    @property
    def df(self):
        return int(np.count_nonzero(self.beta))


def _neg2ll(family, X, y, beta, c_y, phi):
    return float(kernels.point_np(family.code, X @ beta, y, c_y, phi)[2].sum())


def glm_lasso(X, y, family, lam, mask=None, beta0=None, phi=1.0):
    """Fit one lasso-penalized GLM.

    Parameters
    ----------
    X : (n, p) array
    y : (n,) array
    family : FamilySpec
    lam : float
        Penalty on the -2 log-likelihood scale.
    mask : (p,) bool array, optional
        Penalized columns; all columns by default.
    beta0 : (p,) array, optional
        Warm start.

    Returns
    -------
    GLMLassoFit
    """
    X = np.asfortranarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    mask = np.ones(p, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if lam < 0:
        raise InvalidInputError("lambda must be nonnegative")
    pen = np.where(mask, float(lam), 0.0)
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    c_y = np.ascontiguousarray(family.log_c(y, phi), dtype=float)

    def objective(b):
        return _neg2ll(family, X, y, b, c_y, phi) + float(pen @ np.abs(b))

    obj = objective(beta)
    converged = False
    it = 0
    for it in range(1, MAX_IRLS + 1):
        eta = X @ beta
        mu, w, _ = kernels.point_np(family.code, eta, y, c_y, phi)
        w = np.maximum(w, 1e-10)
        # -2 loglik ~ sum w (z - eta)^2 around eta, z the working response
        z = eta + (y - mu) / (phi * w)
        cand = beta.copy()
        kernels.wls_lasso_cd(X, np.ascontiguousarray(w), np.ascontiguousarray(z), cand, pen, CD_SWEEPS, CD_TOL)
        step = cand - beta
        t, new_obj = 1.0, objective(cand)
        while new_obj > obj and t > 1e-6:
            t *= 0.5
            cand = beta + t * step
            new_obj = objective(cand)
        if new_obj > obj:
            converged = True
            break
        done = obj - new_obj <= IRLS_TOL * (1.0 + abs(new_obj))
        beta, obj = cand, new_obj
        if done:
            converged = True
            break
    # rounding residue of coordinates sitting exactly on the dead-zone edge
    beta[mask & (np.abs(beta) < ZERO_TOL)] = 0.0
    return GLMLassoFit(beta, float(lam), _neg2ll(family, X, y, beta, c_y, phi), it, converged)


def null_fit(X, y, family, mask, phi=1.0):
    """Fit with every penalized coefficient held at zero (lambda = infinity)."""
    X = np.asarray(X, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    beta = np.zeros(X.shape[1])
    if (~mask).any():
        sub = glm_lasso(X[:, ~mask], y, family, 0.0, mask=np.zeros(int((~mask).sum()), bool), phi=phi)
        beta[~mask] = sub.beta
    c_y = family.log_c(y, phi)
    return GLMLassoFit(beta, np.inf, _neg2ll(family, X, np.asarray(y, float), beta, c_y, phi), 0, True)


def glm_lambda_max(X, y, family, mask, phi=1.0):
    """Smallest lambda at which every penalized coefficient is zero."""
    mask = np.asarray(mask, dtype=bool)
    eta = X @ null_fit(X, y, family, mask, phi).beta
    mu = kernels.point_np(family.code, eta, np.asarray(y, float), family.log_c(y, phi), phi)[0]
    g = -(2.0 / phi) * (X.T @ (y - mu))
    return float(np.max(np.abs(g[mask]))) if mask.any() else 0.0


def glm_lasso_path(X, y, family, lambdas, mask=None, phi=1.0):
    """Warm-started fits along a decreasing ``lambdas`` sequence."""
    fits, beta = [], None
    for lam in lambdas:
        fit = glm_lasso(X, y, family, lam, mask, beta, phi)
        fits.append(fit)
        beta = fit.beta
    return fits


def log_grid(lam_max, n_lambda=21, ratio=0.01):
    return lam_max * np.logspace(0.0, np.log10(ratio), n_lambda)


def cv_glm_lasso(X, y, family, mask=None, n_folds=5, n_lambda=21, seed=0, phi=1.0):
    """Choose lambda by K-fold cross-validated deviance.

    Folds are a random partition of the observations drawn from ``seed``.
    Returns the refit on all data at the chosen lambda; when every fit
    fails the intercept-only (unpenalized-only) fit is returned.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    mask = np.ones(p, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lam_max = glm_lambda_max(X, y, family, mask, phi)
    if lam_max <= 0:
        return glm_lasso(X, y, family, 0.0, mask, phi=phi)
    grid = log_grid(lam_max, n_lambda)
    folds = np.random.default_rng(seed).permutation(n) % n_folds
    err = np.zeros(n_lambda)
    try:
        for f in range(n_folds):
            tr, te = folds != f, folds == f
            c_te = family.log_c(y[te], phi)
            for j, fit in enumerate(glm_lasso_path(X[tr], y[tr], family, grid, mask, phi)):
                err[j] += _neg2ll(family, X[te], y[te], fit.beta, c_te, phi)
    except (FloatingPointError, np.linalg.LinAlgError, ValueError):
        err[:] = np.nan
    if not np.all(np.isfinite(err)):
        return null_fit(X, y, family, mask, phi)
    best = int(np.argmin(err))
    path = glm_lasso_path(X, y, family, grid[:best + 1], mask, phi)
    return path[-1]
