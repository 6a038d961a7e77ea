"""Penalty paths, information criteria and the two-stage estimators."""
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GLMMLassoError, InvalidInputError
from .model import ParamState
from .objective import grad_exact_all, grad_fixed_u_all
from .optimizer import FitRecord, OptimizerConfig, fit, null_start
from .pirls import solve_mode

N_LAMBDA = 21
LAMBDA_RATIO = 0.01
# keeps rounding in the null-model gradient from activating a coefficient at
# the top of the grid
LAMBDA_MAX_SAFETY = 1.0 + 1e-8


def information_criterion(f, df, n, kind="BIC"):
    """``f + a(n) * df`` with a(n) = log(n) (BIC) or 2 (AIC).

    Parameters
    ----------
    f : float or FitRecord
        Laplace -2 log-likelihood, or a record providing ``f`` and ``df``.
    df : int or None
        Ignored when ``f`` is a record.
    n : int
        Number of observations.
    kind : {"BIC", "AIC"}
    """
    if isinstance(f, FitRecord):
        f, df = f.f, f.df
    kind = kind.upper()
    if kind == "BIC":
        a = math.log(n)
    elif kind == "AIC":
        a = 2.0
    else:
        raise InvalidInputError(f"unknown criterion {kind!r}")
    return float(f) + a * float(df)


@dataclass
class FitPath:
    """Warm-started fits along a decreasing lambda grid."""

    lambdas: np.ndarray
    records: list
    n: int
    null_record: FitRecord = None

    @property
    def df(self):
        return np.array([r.df for r in self.records])

    @property
    def aic(self):
        return np.array([information_criterion(r, None, self.n, "AIC") for r in self.records])

    @property
    def bic(self):
        return np.array([information_criterion(r, None, self.n, "BIC") for r in self.records])

    @property
    def bic_best(self):
        return int(np.argmin(self.bic))

    @property
    def aic_best(self):
        return int(np.argmin(self.aic))


@dataclass
class TwoStageResult:
    stage1: FitRecord
    selected_set: np.ndarray
    stage2: FitRecord
    kind: str
    lambda_thres: float = math.nan
    candidates: list = field(default_factory=list)


def _gradient(problem, record, cfg):
    psi = record.psi_hat
    if cfg.mode == "exact":
        return grad_exact_all(problem, psi.beta, psi.theta, psi.phi, record.u_tilde)
    pr = solve_mode(problem, psi.beta, psi.theta, psi.phi, u_start=record.u_tilde)
    return grad_fixed_u_all(problem, pr, psi.phi, psi.theta, cfg.logdet_in_grad)


def null_model_fit(problem, config=None):
    """Fit with every penalized coefficient held at zero."""
    cfg = config or OptimizerConfig()
    start = null_start(problem, cfg)
    unpen = np.flatnonzero(~problem.penalty_mask)
    if unpen.size == problem.p:
        return fit(problem, 0.0, cfg, start)
    sub = problem.with_columns(unpen) if unpen.size else None
    if sub is None:
        # no unpenalized column: the null model has beta = 0
        return fit(problem, np.inf, cfg, ParamState(np.zeros(problem.p), start.theta, start.phi,
                                                    problem.penalty_mask))
    rec = fit(sub, 0.0, cfg, ParamState(start.beta[unpen], start.theta, start.phi, sub.penalty_mask))
    return _embed(rec, problem, unpen, np.inf)


def _embed(rec, problem, cols, lam):
    """Express a sub-problem record in the coordinates of ``problem``."""
    beta = np.zeros(problem.p)
    beta[cols] = rec.psi_hat.beta
    psi = ParamState(beta, rec.psi_hat.theta, rec.psi_hat.phi, problem.penalty_mask)
    return replace(rec, psi_hat=psi, lam=lam)


def lambda_max(problem, config=None, null_record=None):
    """Largest useful penalty: max |df/dbeta_k| over penalized k at the null fit."""
    cfg = config or OptimizerConfig()
    if null_record is None:
        null_record = null_model_fit(problem, cfg)
    if not problem.penalty_mask.any():
        return 0.0, null_record
    g = _gradient(problem, null_record, cfg)
    return float(np.max(np.abs(g[problem.penalty_mask]))) * LAMBDA_MAX_SAFETY, null_record


def lambda_grid(problem, n_lambda=N_LAMBDA, ratio=LAMBDA_RATIO, config=None):
    """Log-spaced grid from lambda_max down to ``ratio * lambda_max``.

    Returns ``(grid, null_record)``.  A zero lambda_max gives the degenerate
    grid ``[0.0]`` with a warning.
    """
    if n_lambda < 1:
        raise InvalidInputError("n_lambda must be positive")
    lam_max, null_rec = lambda_max(problem, config)
    if lam_max <= 0:
        warnings.warn("lambda_max is zero: no penalized signal, using the grid [0]", RuntimeWarning)
        return np.array([0.0]), null_rec
    if n_lambda == 1:
        return np.array([lam_max]), null_rec
    return lam_max * np.logspace(0.0, math.log10(ratio), n_lambda), null_rec


def fit_path(problem, lambdas=None, config=None, n_lambda=N_LAMBDA, ratio=LAMBDA_RATIO):
    """Fit every lambda of a decreasing grid, warm-starting from the previous fit.

    The first fit starts from the null model (penalized coefficients zero).
    """
    cfg = config or OptimizerConfig()
    null_rec = None
    if lambdas is None:
        lambdas, null_rec = lambda_grid(problem, n_lambda, ratio, cfg)
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size > 1 and not np.all(np.diff(lambdas) < 0):
        raise InvalidInputError("lambdas must be strictly decreasing")
    if null_rec is None:
        null_rec = null_model_fit(problem, cfg)
    records = []
    prev = null_rec
    for lam in lambdas:
        rec = fit(problem, lam, cfg, prev.psi_hat.copy(), u_start=prev.u_tilde)
        records.append(rec)
        prev = rec
    return FitPath(lambdas, records, problem.n, null_rec)


def refit(problem, support, config=None, warm=None):
    """Unpenalized (lambda = 0) fit on ``support`` plus the unpenalized columns.

    Returns a record whose coefficients are expressed on all p columns.
    """
    cfg = config or OptimizerConfig()
    keep = np.union1d(np.asarray(support, dtype=int), np.flatnonzero(~problem.penalty_mask))
    sub = problem.with_columns(keep)
    if warm is not None:
        start = ParamState(warm.psi_hat.beta[keep], warm.psi_hat.theta, warm.psi_hat.phi, sub.penalty_mask)
        u0 = warm.u_tilde
    else:
        start, u0 = None, None
    rec = fit(sub, 0.0, cfg, start, u_start=u0)
    return _embed(rec, problem, keep, 0.0)


def _selected(record, problem):
    return np.flatnonzero((record.psi_hat.beta != 0) & problem.penalty_mask)


def select_hybrid(path, problem, config=None):
    """BIC-best stage-1 fit followed by an unpenalized refit on its support."""
    if not path.records:
        raise InvalidInputError("empty path")
    stage1 = path.records[path.bic_best]
    S = _selected(stage1, problem)
    if S.size == 0:
        warnings.warn("hybrid: empty selected set, refitting the unpenalized columns only", RuntimeWarning)
    stage2 = refit(problem, S, config, stage1)
    return TwoStageResult(stage1, S, stage2, "hybrid")


def threshold_grid(beta_abs):
    """Midpoints separating the sorted distinct nonzero |beta| values.

    The first threshold lies below the smallest value, so every achievable
    thresholded set is visited exactly once.
    """
    v = np.unique(beta_abs[beta_abs > 0])
    if v.size == 0:
        return np.array([])
    return np.r_[0.5 * v[0], 0.5 * (v[:-1] + v[1:])]


def select_thresholded(path, problem, config=None, thres_grid=None):
    """AIC-best stage-1 fit, thresholded supports refitted, BIC picks the threshold."""
    if not path.records:
        raise InvalidInputError("empty path")
    stage1 = path.records[path.aic_best]
    babs = np.where(problem.penalty_mask, np.abs(stage1.psi_hat.beta), 0.0)
    grid = threshold_grid(babs) if thres_grid is None else np.sort(np.asarray(thres_grid, dtype=float))
    cands = []
    for t in grid:
        S = np.flatnonzero(babs > t)
        if S.size == 0:
            continue
        rec = refit(problem, S, config, stage1)
        cands.append((information_criterion(rec, None, problem.n, "BIC"), float(t), S, rec))
    if not cands:
        warnings.warn("thresholded: every thresholded set is empty, refitting the unpenalized columns only",
                      RuntimeWarning)
        rec = refit(problem, np.array([], dtype=int), config, stage1)
        t = float(grid[-1]) if len(grid) else math.nan
        return TwoStageResult(stage1, np.array([], dtype=int), rec, "thresholded", t, [])
    best = min(range(len(cands)), key=lambda i: cands[i][0])
    bic, t, S, rec = cands[best]
    summary = [(c[1], c[0], c[2].size) for c in cands]
    return TwoStageResult(stage1, S, rec, "thresholded", t, summary)


def out_of_sample_nll(record, problem, new_dataset):
    """Laplace -2 log-likelihood of ``new_dataset`` at the fitted parameters.

    The random-effects mode is re-solved on the new data (new group levels
    are allowed); no penalty is added.
    """
    new = problem.with_dataset(new_dataset)
    psi = record.psi_hat
    if psi.beta.shape != (new.p,):
        raise InvalidInputError("fitted coefficients do not match the new design")
    pr = solve_mode(new, psi.beta, psi.theta, psi.phi)
    return pr.deviance + pr.logdet + pr.u_norm2


def compare_exact_approx(problem, lambdas=None, config=None, n_lambda=N_LAMBDA, mode_a="approximate",
                         mode_e="exact"):
    """Exact-versus-approximate metrics along one lambda grid.

    Both modes use the grid of the approximate mode.  Per lambda:
    rel_ll = |f_a - f_e| / |f_e|, rel_fix = ||beta_a - beta_e|| / ||beta_e||,
    rel_iter = outer iterations a / e, active-set coincidence; rel_time is
    reported only.  Non-converged pairs are excluded from the means and
    counted.
    """
    base = config or OptimizerConfig()
    cfg_a = replace(base, mode=mode_a)
    cfg_e = replace(base, mode=mode_e)
    if lambdas is None:
        lambdas, _ = lambda_grid(problem, n_lambda, config=cfg_a)
    t0 = time.perf_counter()
    pa = fit_path(problem, lambdas, cfg_a)
    ta = time.perf_counter() - t0
    t0 = time.perf_counter()
    pe = fit_path(problem, lambdas, cfg_e)
    te = time.perf_counter() - t0
    rows = []
    for lam, ra, re in zip(lambdas, pa.records, pe.records):
        ok = ra.converged and re.converged
        nb = float(np.linalg.norm(re.beta))
        rows.append({
            "lambda": float(lam),
            "converged": ok,
            "rel_ll": abs(ra.f - re.f) / abs(re.f),
            "rel_fix": float(np.linalg.norm(ra.beta - re.beta)) / nb if nb > 0 else 0.0,
            "rel_iter": ra.outer_iterations / max(re.outer_iterations, 1),
            "active_set_match": bool(np.array_equal(ra.active_set, re.active_set)),
        })
    kkt = [bool(r.kkt_ok) for r in pa.records + pe.records if r.converged]
    return {"per_lambda": rows, "summary": summarize_comparison(rows), "rel_time": ta / te if te > 0 else math.nan,
            "kkt_ok": kkt}


def summarize_comparison(rows):
    good = [r for r in rows if r["converged"]]
    out = {"n": len(rows), "excluded": len(rows) - len(good)}
    for key in ("rel_ll", "rel_fix", "rel_iter", "active_set_match"):
        vals = np.array([float(r[key]) for r in good])
        out[key + "_mean"] = float(vals.mean()) if vals.size else math.nan
        out[key + "_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
    return out


__all__ = ["FitPath", "TwoStageResult", "information_criterion", "lambda_grid", "lambda_max", "fit_path",
           "refit", "select_hybrid", "select_thresholded", "threshold_grid", "out_of_sample_nll",
           "compare_exact_approx", "summarize_comparison", "null_model_fit", "GLMMLassoError"]
