"""Simulation designs, data generation and replicated studies.

Random numbers come from numpy's PCG64 generator.  Replicate ``r`` of a study
with seed ``s`` draws from ``SeedSequence(s, spawn_key=(r,))`` (growing-p
runs use ``spawn_key=(j, r)`` for the j-th p value), so every replicate is
reproducible on its own and results do not depend on the worker count.
"""
import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import GLMMLassoError, InvalidInputError
from .family import make_family
from .glm_lasso import glm_lambda_max, glm_lasso_path, log_grid
from .model import CovarianceTemplate, CovBlock, Dataset
from .optimizer import OptimizerConfig
from .problem import GLMMProblem
from .selection import (compare_exact_approx, fit_path, out_of_sample_nll, refit, select_hybrid,
                        select_thresholded)

MAD_SCALE = 1.4826
METHODS = ("oracle", "glmmlasso", "glm_lasso", "hybrid", "thresholded")
DESK_P_HIGH = 150
DESK_REPLICATES = 20
FULL_REPLICATES = 100


@dataclass
class SimDesign:
    """A data-generating process.

    ``re_var`` holds the random-effect variances of the variables in
    ``re_columns`` (column 0 is the intercept); ``corr_re`` the correlation
    between the first two random effects when the template is unstructured.
    """

    name: str
    family: str
    N: int
    n_C: int
    p: int
    beta0: np.ndarray
    re_var: tuple = (1.0,)
    re_columns: tuple = (0,)
    rho_x: float = 0.2
    corr_re: float = None
    structure: str = "diagonal"

    def __post_init__(self):
        b = np.zeros(self.p)
        given = np.asarray(self.beta0, dtype=float)
        if given.size > self.p:
            raise InvalidInputError("beta0 longer than p")
        b[:given.size] = given
        self.beta0 = b
        if len(self.re_var) != len(self.re_columns):
            raise InvalidInputError("re_var and re_columns differ in length")
        if self.N < 1 or self.n_C < 1 or self.p < 1:
            raise InvalidInputError("N, n_C and p must be positive")

    @property
    def n(self):
        return self.N * self.n_C

    @property
    def s0(self):
        return int(np.count_nonzero(self.beta0))

    @property
    def support(self):
        return np.flatnonzero(self.beta0)

    def sigma(self):
        sd = np.sqrt(np.asarray(self.re_var, dtype=float))
        S = np.diag(sd ** 2)
        if self.corr_re is not None and len(sd) >= 2:
            S[0, 1] = S[1, 0] = self.corr_re * sd[0] * sd[1]
        return S


_LOGIT_BETA = (0.1, 1.0, -1.0, 1.0, -1.0)
_POIS_BETA = (0.05, 0.5, -0.5, 0.5, -0.5)


def design(name, desk=True, p=None):
    """Named design; ``desk`` reduces p of the high-dimensional settings."""
    hi = (lambda full: DESK_P_HIGH if desk else full)
    two = dict(re_var=(1.0, 1.0), re_columns=(0, 1))
    table = {
        "logistic_L1": lambda: SimDesign("logistic_L1", "bernoulli", 40, 10, 10, _LOGIT_BETA, **two),
        "logistic_L2": lambda: SimDesign("logistic_L2", "bernoulli", 40, 10, 50, _LOGIT_BETA, **two),
        "logistic_H1": lambda: SimDesign("logistic_H1", "bernoulli", 40, 10, hi(500), _LOGIT_BETA, **two),
        "logistic_H2": lambda: SimDesign("logistic_H2", "bernoulli", 50, 10, hi(1500), _LOGIT_BETA, **two),
        "logistic_H1_corr": lambda: SimDesign("logistic_H1_corr", "bernoulli", 40, 10, hi(500), _LOGIT_BETA,
                                              corr_re=0.5, structure="unstructured_lower", **two),
        "poisson_L1": lambda: SimDesign("poisson_L1", "poisson", 20, 10, 10, _POIS_BETA),
        "poisson_L2": lambda: SimDesign("poisson_L2", "poisson", 20, 10, 50, _POIS_BETA),
        "poisson_H1": lambda: SimDesign("poisson_H1", "poisson", 40, 10, hi(500), _POIS_BETA),
        "poisson_H2": lambda: SimDesign("poisson_H2", "poisson", 40, 10, hi(1000), _POIS_BETA),
        "poisson_H3": lambda: SimDesign("poisson_H3", "poisson", 30, 10, hi(500), (2.0, 0.5, -0.5, 0.5, -0.5),
                                        re_var=(0.25,)),
        "growing_p": lambda: SimDesign("growing_p", "bernoulli", 40, 10, 5, (0.0, 1.0, -1.0, 1.0, -1.0)),
    }
    if name not in table:
        raise InvalidInputError(f"unknown design {name!r}; valid: {', '.join(sorted(table))}")
    d = table[name]()
    if p is not None:
        d = replace(d, p=int(p), beta0=d.beta0[:min(int(p), d.p)])
    return d


DESIGN_NAMES = ("logistic_L1", "logistic_L2", "logistic_H1", "logistic_H2", "logistic_H1_corr", "poisson_L1",
                "poisson_L2", "poisson_H1", "poisson_H2", "poisson_H3", "growing_p")


def gen_design_matrix(N, n_C, p, rho_x, rng):
    """Intercept plus p - 1 AR(1)-correlated standard normal columns.

    Rows are i.i.d. N(0, V) with V_kk' = rho_x^|k - k'|, generated by
    x_k = rho x_{k-1} + sqrt(1 - rho^2) e_k.
    """
    n = N * n_C
    X = np.empty((n, p))
    X[:, 0] = 1.0
    if p > 1:
        e = rng.standard_normal((n, p - 1))
        X[:, 1] = e[:, 0]
        s = math.sqrt(1.0 - rho_x * rho_x)
        for j in range(2, p):
            X[:, j] = rho_x * X[:, j - 1] + s * e[:, j - 1]
    return X


def gen_response(d, X, rng):
    """Draw random effects and the response; returns ``(y, b)`` with b of shape (N, k)."""
    S = d.sigma()
    k = S.shape[0]
    # diagonal root allows zero variances (a plain GLM)
    L = np.linalg.cholesky(S) if d.corr_re is not None else np.diag(np.sqrt(np.diag(S)))
    b = rng.standard_normal((d.N, k)) @ L.T
    g = np.repeat(np.arange(d.N), d.n_C)
    eta = X @ d.beta0 + np.sum(X[:, list(d.re_columns)] * b[g], axis=1)
    if d.family == "bernoulli":
        y = (rng.random(d.n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    elif d.family == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
    elif d.family == "gaussian":
        y = eta + rng.standard_normal(d.n)
    else:
        raise InvalidInputError(f"unknown family {d.family!r}")
    return y, b


def generate(d, rng):
    """One data set of design ``d`` as ``(Dataset, b)``."""
    X = gen_design_matrix(d.N, d.n_C, d.p, d.rho_x, rng)
    y, b = gen_response(d, X, rng)
    g = np.repeat(np.arange(d.N), d.n_C)
    names = ["intercept"] + [f"x{j}" for j in range(1, d.p)]
    ds = Dataset.create(y, X, [g], [list(d.re_columns)], column_names=names, group_names=["group"])
    return ds, b


def problem_for(d, ds):
    template = CovarianceTemplate((CovBlock(0, tuple(d.re_columns), d.structure),))
    return GLMMProblem(ds, template, make_family(d.family))


def replicate_rng(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


# ---------------------------------------------------------------------------
# one replicate
# ---------------------------------------------------------------------------

def _variances(problem, theta):
    return np.diag(problem.template.factor_covariance(theta, 0)).copy()


def _summary(d, beta, var, selected=None):
    support = set(d.support.tolist())
    S = np.flatnonzero(beta) if selected is None else selected
    return {
        "size": int(len(S)),
        "tp": int(len(support.intersection(S.tolist()))),
        "var": [float(v) for v in var],
        "beta": [float(v) for v in beta[:5]],
        "se": float(np.sum((beta - d.beta0) ** 2)),
    }


def _glm_lasso_bic(problem):
    fam = problem.family
    X, y, mask = problem.X, problem.y, problem.penalty_mask
    grid = log_grid(glm_lambda_max(X, y, fam, mask), 21)
    fits = glm_lasso_path(X, y, fam, grid, mask)
    bic = [f.neg2_loglik + math.log(problem.n) * f.df for f in fits]
    return fits[int(np.argmin(bic))].beta


def run_replicate(d, methods, seed, r, config=None):
    """Fit every requested method on replicate ``r``; failures are recorded, not raised."""
    rng = replicate_rng(seed, r)
    ds, _ = generate(d, rng)
    problem = problem_for(d, ds)
    cfg = config or OptimizerConfig()
    out = {}
    path = None
    n_var = len(d.re_columns)
    for m in methods:
        try:
            if m == "oracle":
                rec = refit(problem, d.support[problem.penalty_mask[d.support]], cfg)
                out[m] = _summary(d, rec.beta, _variances(problem, rec.theta))
                out[m]["converged"] = bool(rec.converged)
                out[m]["kkt_ok"] = bool(rec.kkt_ok)
            elif m == "glm_lasso":
                beta = _glm_lasso_bic(problem)
                out[m] = _summary(d, beta, [math.nan] * n_var)
            else:
                if path is None:
                    path = fit_path(problem, config=cfg)
                if m == "glmmlasso":
                    rec = path.records[path.bic_best]
                elif m == "hybrid":
                    rec = select_hybrid(path, problem, cfg).stage2
                elif m == "thresholded":
                    rec = select_thresholded(path, problem, cfg).stage2
                else:
                    raise InvalidInputError(f"unknown method {m!r}")
                out[m] = _summary(d, rec.beta, _variances(problem, rec.theta))
                out[m]["converged"] = bool(rec.converged)
                out[m]["kkt_ok"] = bool(rec.kkt_ok)
        except InvalidInputError:
            raise
        except (GLMMLassoError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out[m] = {"error": f"{type(exc).__name__}: {exc}"}
    if path is not None:
        out["_path"] = {"converged": [bool(r.converged) for r in path.records],
                        "kkt_ok": [bool(r.kkt_ok) for r in path.records if r.converged]}
    return out


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def _worker(args):
    fn, a = args
    with threadpool_limits(1):
        return fn(*a)


def _map(fn, arglist, workers):
    """Ordered map, optionally over processes; BLAS is single-threaded either way."""
    if workers is None:
        workers = int(os.environ.get("GLMMLASSO_WORKERS", "0")) or os.cpu_count() or 1
    if workers <= 1 or len(arglist) <= 1:
        return [_worker((fn, a)) for a in arglist]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_worker, [(fn, a) for a in arglist]))


def mad(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan
    return float(MAD_SCALE * np.median(np.abs(x - np.median(x))))


@dataclass
class StudyResult:
    design: SimDesign
    methods: tuple
    replicates: list
    columns: list = field(default_factory=list)

    def values(self, method, key, index=None):
        vals = []
        for rep in self.replicates:
            res = rep.get(method, {})
            if "error" in res or key not in res:
                continue
            v = res[key] if index is None else res[key][index]
            vals.append(v)
        return np.asarray(vals, dtype=float)

    def failures(self, method):
        return sum(1 for rep in self.replicates if "error" in rep.get(method, {"error": 1}))

    def table(self):
        """Rows ``(method, column, median, mad)`` in the study-table layout."""
        n_var = len(self.design.re_columns)
        cols = [("|S|", "size", None), ("TP", "tp", None)]
        cols += [(f"theta{j + 1}^2", "var", j) for j in range(n_var)]
        cols += [(f"beta{j + 1}", "beta", j) for j in range(min(5, self.design.p))]
        cols += [("SE", "se", None)]
        rows = []
        for m in self.methods:
            for label, key, idx in cols:
                v = self.values(m, key, idx)
                v = v[np.isfinite(v)]
                rows.append((m, label, float(np.median(v)) if v.size else math.nan, mad(v)))
        return [c[0] for c in cols], rows

    def to_csv(self):
        labels, rows = self.table()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "statistic", "median", "mad", "failures"])
        for m, label, med, md in rows:
            w.writerow([m, label, _fmt(med), _fmt(md), self.failures(m)])
        return buf.getvalue()

    def to_text(self):
        labels, rows = self.table()
        by = {}
        for m, label, med, md in rows:
            by.setdefault(m, {})[label] = (med, md)
        d = self.design
        head = f"{d.name}: N={d.N}, n_C={d.n_C}, p={d.p}, replicates={len(self.replicates)}"
        width = max(len(m) for m in self.methods) + 2
        lines = [head, "method".ljust(width) + "".join(l.rjust(10) for l in labels)]
        truth = [d.s0, d.s0] + list(d.re_var) + list(d.beta0[:5]) + [0.0]
        lines.append("true".ljust(width) + "".join(_short(v).rjust(10) for v in truth[:len(labels)]))
        for m in self.methods:
            lines.append(m.ljust(width) + "".join(_short(by[m][l][0]).rjust(10) for l in labels))
            lines.append("".ljust(width) + "".join(("(" + _short(by[m][l][1]) + ")").rjust(10) for l in labels))
        fails = {m: self.failures(m) for m in self.methods if self.failures(m)}
        if fails:
            lines.append("failed replicates: " + ", ".join(f"{m}={c}" for m, c in fails.items()))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "nan" if not math.isfinite(v) else repr(round(float(v), 10))


def _short(v):
    if not math.isfinite(v):
        return "-"
    return f"{v:.3g}"


def run_study(d, methods=("oracle", "glmmlasso", "hybrid"), n_replicates=DESK_REPLICATES, seed=0, workers=1,
              config=None):
    """Replicated study of ``d``; returns a :class:`StudyResult`."""
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise InvalidInputError(f"unknown methods {bad}; valid: {', '.join(METHODS)}")
    args = [(d, tuple(methods), seed, r, config) for r in range(n_replicates)]
    reps = _map(run_replicate, args, workers)
    return StudyResult(d, tuple(methods), reps)


# ---------------------------------------------------------------------------
# growing number of noise covariates
# ---------------------------------------------------------------------------

GROWING_P = (5, 25, 45, 65)
GROWING_METHODS = ("glmmlasso", "hybrid", "full_ml")


def growing_p_replicate(p, j, seed, r, config=None):
    """Out-of-sample -2 log L of each method for one (p, replicate).

    The test set uses fresh groups and fresh covariates from the same design.
    """
    d = design("growing_p", p=p)
    rng = replicate_rng(seed, j, r)
    train, _ = generate(d, rng)
    test, _ = generate(d, rng)
    problem = problem_for(d, train)
    cfg = config or OptimizerConfig()
    out = {}
    kkt = []
    try:
        path = fit_path(problem, config=cfg)
        hyb = select_hybrid(path, problem, cfg).stage2
        out["glmmlasso"] = out_of_sample_nll(path.records[path.bic_best], problem, test)
        out["hybrid"] = out_of_sample_nll(hyb, problem, test)
        kkt += [bool(r.kkt_ok) for r in path.records + [hyb] if r.converged]
    except (GLMMLassoError, ArithmeticError) as exc:
        out["error_path"] = str(exc)
    try:
        full = refit(problem, np.arange(p), cfg)
        out["full_ml"] = out_of_sample_nll(full, problem, test)
        if full.converged:
            kkt.append(bool(full.kkt_ok))
    except (GLMMLassoError, ArithmeticError) as exc:
        out["error_full"] = str(exc)
    # KKT flags of the converged fits, for certificates
    out["_kkt"] = kkt
    return out


@dataclass
class SeriesResult:
    ps: tuple
    methods: tuple
    runs: dict

    def median(self, method, p):
        v = np.array([r[method] for r in self.runs[p] if method in r], dtype=float)
        return float(np.median(v)) if v.size else math.nan

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p"] + [f"{m}_median" for m in self.methods] + [f"{m}_mad" for m in self.methods])
        for p in self.ps:
            meds = [_fmt(self.median(m, p)) for m in self.methods]
            mads = [_fmt(mad([r[m] for r in self.runs[p] if m in r])) for m in self.methods]
            w.writerow([p] + meds + mads)
        return buf.getvalue()

    def to_text(self):
        lines = ["out-of-sample -2 log L (median over replicates)",
                 "p".rjust(4) + "".join(m.rjust(12) for m in self.methods)]
        for p in self.ps:
            lines.append(str(p).rjust(4) + "".join(f"{self.median(m, p):12.2f}" for m in self.methods))
        return "\n".join(lines) + "\n"


def growing_p(ps=GROWING_P, n_replicates=10, seed=0, workers=1, config=None):
    args = [(p, j, seed, r, config) for j, p in enumerate(ps) for r in range(n_replicates)]
    res = _map(growing_p_replicate, args, workers)
    runs = {p: res[j * n_replicates:(j + 1) * n_replicates] for j, p in enumerate(ps)}
    return SeriesResult(tuple(ps), GROWING_METHODS, runs)


# ---------------------------------------------------------------------------
# exact versus approximate algorithm
# ---------------------------------------------------------------------------

COMPARE_KEYS = ("rel_ll", "rel_fix", "rel_iter", "active_set_match")


def compare_replicate(d, seed, r, config=None, self_check=False):
    """Metrics of one replicate; ``self_check`` compares the exact algorithm with itself."""
    ds, _ = generate(d, replicate_rng(seed, r))
    if self_check:
        return compare_exact_approx(problem_for(d, ds), config=replace(config or OptimizerConfig(), mode="exact"),
                                    mode_a="exact", mode_e="exact")
    return compare_exact_approx(problem_for(d, ds), config=config)


@dataclass
class CompareResult:
    name: str
    runs: list

    def per_replicate(self, key):
        """Mean over the lambda grid of each replicate (converged pairs only)."""
        return np.array([run["summary"][key + "_mean"] for run in self.runs], dtype=float)

    def mean(self, key):
        v = self.per_replicate(key)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else math.nan

    def sd(self, key):
        v = self.per_replicate(key)
        v = v[np.isfinite(v)]
        return float(v.std(ddof=1)) if v.size > 1 else math.nan

    @property
    def excluded(self):
        return int(sum(run["summary"]["excluded"] for run in self.runs))

    def to_csv(self):
        """Per-lambda rows of every replicate, then the aggregate rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "lambda", "converged"] + list(COMPARE_KEYS))
        for r, run in enumerate(self.runs):
            for row in run["per_lambda"]:
                w.writerow([r, _fmt(row["lambda"]), int(row["converged"])]
                           + [_fmt(float(row[k])) for k in COMPARE_KEYS])
        for stat in ("mean", "sd"):
            w.writerow([stat, "", ""] + [_fmt(getattr(self, stat)(k)) for k in COMPARE_KEYS])
        return buf.getvalue()

    def to_text(self):
        lines = [f"{self.name}: exact vs approximate, replicates={len(self.runs)}, excluded pairs={self.excluded}"]
        for k in COMPARE_KEYS:
            lines.append(f"{k:>18s} {self.mean(k):.3g} ({self.sd(k):.2g})")
        return "\n".join(lines) + "\n"

    def timing_text(self):
        """Wall-clock ratio approximate / exact; machine dependent, kept out of the tables."""
        rt = np.array([run["rel_time"] for run in self.runs], dtype=float)
        return f"rel_time median {np.median(rt):.3g} over {rt.size} replicates\n"


def compare_study(d, n_replicates=10, seed=0, workers=1, config=None, self_check=False):
    args = [(d, seed, r, config, self_check) for r in range(n_replicates)]
    return CompareResult(d.name, _map(compare_replicate, args, workers))
