"""Coordinate gradient descent for the Laplace-approximated lasso objective.

Each outer iteration cycles

1. the fixed effects beta_k (active set, with a full sweep every ``D``-th
   iteration), using the soft-threshold descent direction and an Armijo
   line search,
2. each covariance parameter theta_l by exact scalar minimisation,
3. the dispersion phi (gaussian with unknown dispersion only).

Two modes are provided.  ``exact`` differentiates f including the dependence
of the random-effects mode on beta_k (finite differences) and line-searches
the exact objective.  ``approximate`` holds the mode u~ fixed while
computing the gradient and running the line search; every accepted step is
then checked against the exact objective (mode re-solved), so the recorded
objective trace is nonincreasing in both modes.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConvergenceError, GLMMLassoError, InvalidInputError, NumericalError
from .family import make_family
from .glm_lasso import cv_glm_lasso, null_fit
from .model import ParamState
from .objective import (ObjectiveValue, fixed_u_terms, grad_beta_exact, grad_exact_all, grad_fixed_u_all,
                        grad_implicit_all, objective_from_mode, penalty_value, score_vector)
from .pirls import solve_mode

MODES = ("exact", "approximate")
_MODE_ALIASES = {"exact": "exact", "approximate": "approximate", "approx": "approximate"}
SCALAR_MIN_DECREASE = 1e-10  # relative decrease required to move theta or phi
Q_RESOLUTION = 8 * np.finfo(float).eps  # relative rounding level of an objective value
PHI_MIN = 1e-8


@dataclass
class OptimizerConfig:
    """Tuning constants of the coordinate gradient descent.

    Defaults follow the usual choices for this algorithm: alpha_init = 1,
    delta = 0.5, rho = 0.1, gamma = 0, Hessian clamps [1e-5, 1e5] and a full
    sweep every 5 outer iterations.
    """

    mode: str = "approximate"
    alpha_init: float = 1.0
    delta: float = 0.5
    rho_armijo: float = 0.1
    gamma: float = 0.0
    c_min: float = 1e-5
    c_max: float = 1e5
    active_set_period: int = 5
    max_outer_iter: int = 200
    outer_tol: float = 1e-6
    max_armijo_backtracks: int = 30
    scalar_opt_tol: float = 1e-7
    theta_max: float = 1e3
    phi_max: float = 1e6
    logdet_in_grad: bool = True
    kkt_check: bool = True
    record_updates: bool = False

    def __post_init__(self):
        mode = _MODE_ALIASES.get(str(self.mode).lower())
        if mode is None:
            raise InvalidInputError(f"unknown optimizer mode {self.mode!r}; use exact or approximate")
        self.mode = mode
        if not 0 < self.delta < 1:
            raise InvalidInputError("delta must lie in (0, 1)")
        if not 0 < self.rho_armijo < 1:
            raise InvalidInputError("rho_armijo must lie in (0, 1)")
        if not 0 <= self.gamma < 1:
            raise InvalidInputError("gamma must lie in [0, 1)")
        if not 0 < self.c_min <= self.c_max:
            raise InvalidInputError("need 0 < c_min <= c_max")
        if self.active_set_period < 1:
            raise InvalidInputError("active_set_period must be >= 1")
        if self.alpha_init <= 0 or self.max_outer_iter < 1 or self.max_armijo_backtracks < 0:
            raise InvalidInputError("invalid iteration settings")


@dataclass
class FitRecord:
    """Result of one fit at a fixed lambda."""

    psi_hat: ParamState
    u_tilde: np.ndarray
    q_la_final: float
    objective: ObjectiveValue
    lam: float
    outer_iterations: int
    converged: bool
    trace: list
    mode: str = "approximate"
    kkt_ok: bool = False
    kkt_violation: float = math.nan
    flags: dict = field(default_factory=dict)
    update_trace: list = None

    @property
    def active_set(self):
        return np.flatnonzero(self.psi_hat.beta != 0)

    @property
    def beta(self):
        return self.psi_hat.beta

    @property
    def theta(self):
        return self.psi_hat.theta

    @property
    def phi(self):
        return self.psi_hat.phi

    @property
    def f(self):
        return self.objective.f

    @property
    def df(self):
        """Nonzero fixed effects plus covariance parameters (phi not counted)."""
        return int(np.count_nonzero(self.psi_hat.beta)) + int(self.psi_hat.theta.size)


def descent_direction(grad, h, lam, beta_k, penalized=True):
    """Minimiser of ``grad*d + h*d**2/2 + lam*|beta_k + d|`` over d.

    For a penalized coordinate this is the median of
    ``(lam - grad)/h``, ``-beta_k`` and ``(-lam - grad)/h``; otherwise the
    Newton step ``-grad/h``.  Equal arguments return their common value.

    Examples
    --------
    >>> descent_direction(5.0, 2.0, 2.0, 0.0)
    -1.5
    >>> descent_direction(0.5, 1.0, 1.0, 0.0)
    0.0
    """
    if h <= 0:
        raise InvalidInputError("h must be positive")
    if not penalized:
        return -grad / h
    a = (lam - grad) / h
    b = -beta_k
    c = (-lam - grad) / h
    # median of three
    if a > b:
        a, b = b, a
    if b > c:
        b = c
    return float(max(a, b)) + 0.0


def armijo_delta(grad, d, h, lam, beta_k, penalized, gamma=0.0):
    """Predicted decrease used by the Armijo rule."""
    out = grad * d + gamma * d * d * h
    if penalized:
        out += lam * (abs(beta_k + d) - abs(beta_k))
    return out


def _kkt_violations(g, beta, mask, lam):
    """Per-coordinate distance from the lasso stationarity conditions."""
    viol = np.abs(g).astype(float)
    pen = mask
    zero = pen & (beta == 0)
    nz = pen & (beta != 0)
    viol[zero] = np.maximum(0.0, np.abs(g[zero]) - lam)
    viol[nz] = np.abs(g[nz] + lam * np.sign(beta[nz]))
    return viol


def kkt_tolerance(lam):
    return 1e-3 * lam + 1e-6


def kkt_check(problem, record, mode=None, logdet_in_grad=True):
    """Check the dead-zone / stationarity conditions at a fitted record.

    Uses the fixed-mode gradient in approximate mode and the finite-difference
    gradient of f in exact mode.  In approximate mode a coordinate that fails
    the fixed-mode condition passes if it meets the exact condition (such
    coordinates were moved by exact-gradient steps).  Returns
    ``(ok, max_violation, per_coordinate)``.
    """
    mode = _MODE_ALIASES[mode or record.mode]
    psi = record.psi_hat
    pr = solve_mode(problem, psi.beta, psi.theta, psi.phi, u_start=record.u_tilde)
    viol = _kkt_state(problem, psi.beta, psi.theta, psi.phi, pr, record.lam, mode, logdet_in_grad)
    worst = float(viol.max()) if viol.size else 0.0
    return worst <= kkt_tolerance(record.lam), worst, viol


def _kkt_state(problem, beta, theta, phi, pr, lam, mode, logdet_in_grad):
    mask = problem.penalty_mask
    if mode == "exact":
        g = grad_exact_all(problem, beta, theta, phi, pr.u_tilde)
        return _kkt_violations(g, beta, mask, lam)
    g = grad_fixed_u_all(problem, pr, phi, theta, logdet_in_grad)
    viol = _kkt_violations(g, beta, mask, lam)
    # coordinates handled by the exact fallback satisfy the exact condition
    bad = np.flatnonzero(viol > kkt_tolerance(lam))
    if bad.size:
        ge = grad_implicit_all(problem, pr, phi, theta)[bad]
        ve = _kkt_violations(ge, beta[bad], mask[bad], lam)
        viol[bad] = np.minimum(viol[bad], ve)
    return viol


class _Fit:
    """Mutable state of one coordinate-descent run."""

    def __init__(self, problem, lam, cfg, psi, u_start=None):
        self.problem = problem
        self.lam = float(lam)
        self.cfg = cfg
        self.mask = problem.penalty_mask
        self.beta = np.array(psi.beta, dtype=float)
        self.theta = np.array(psi.theta, dtype=float)
        fam = problem.family
        self.phi = float(fam.phi_fixed) if fam.dispersion_known else float(psi.phi)
        if self.beta.shape != (problem.p,) or self.theta.shape != (problem.d,):
            raise InvalidInputError("starting values do not match the problem dimensions")
        self.diag = problem.template.is_diagonal_param()
        self.xb = problem.X @ self.beta
        self.pr = solve_mode(problem, None, self.theta, self.phi, u_start=u_start, xb=self.xb)
        self.obj = objective_from_mode(self.pr, self.beta, self.mask, self.lam)
        self.flags = {"armijo_fail": 0, "guard_reject": 0, "skipped_rounding": 0, "scalar_fail": 0,
                      "exact_fallback": 0}
        self.updates = [] if cfg.record_updates else None
        self._grad = None
        self._grad_exact = None
        self._exact_coords = set()
        self._theta_seen = np.zeros(problem.d, dtype=bool)
        self._theta_step = np.zeros(problem.d)
        self._phi_seen = False
        self._phi_step = 0.0

    # -- helpers -----------------------------------------------------------
    def _commit(self, what, pr, obj):
        self.pr, self.obj = pr, obj
        self._grad = None
        self._grad_exact = None
        if self.updates is not None:
            self.updates.append((what, obj.q_la))

    def _solve(self, xb, theta, phi, u_start, beta_pen):
        """Exact objective at a trial point; None when PIRLS fails."""
        try:
            pr = solve_mode(self.problem, None, theta, phi, u_start=u_start, xb=xb)
            f = pr.deviance + pr.logdet + pr.u_norm2
        except (ConvergenceError, NumericalError, FloatingPointError):
            return None
        if not math.isfinite(f):
            return None
        return pr, ObjectiveValue(f + beta_pen, f, pr.deviance, pr.logdet, pr.u_norm2, beta_pen)

    def _gradient(self, k):
        if self.cfg.mode == "exact":
            return grad_beta_exact(k, self.problem, self.beta, self.theta, self.phi, self.pr.u_tilde, self.xb)
        if k in self._exact_coords:
            return self._implicit_gradient(k)
        if self._grad is None:
            self._grad = score_vector(self.problem, self.pr, self.phi, self.theta, self.cfg.logdet_in_grad)
        return float(self.problem.X[:, k] @ self._grad)

    def _implicit_gradient(self, k):
        if self._grad_exact is None:
            self._grad_exact = score_vector(self.problem, self.pr, self.phi, self.theta, True, True)
        return float(self.problem.X[:, k] @ self._grad_exact)

    def _curvature(self, k):
        xk = self.problem.X[:, k]
        return min(max(2.0 * float((xk * xk) @ self.pr.W), self.cfg.c_min), self.cfg.c_max)

    # -- step (1): one fixed-effect coordinate ----------------------------
    def update_beta(self, k):
        cfg = self.cfg
        pen_k = bool(self.mask[k])
        bk = self.beta[k]
        try:
            g = self._gradient(k)
        except (ConvergenceError, NumericalError):
            self.flags["armijo_fail"] += 1
            return
        h = self._curvature(k)
        d = descent_direction(g, h, self.lam, bk, pen_k)
        if d == 0.0:
            return
        delta = armijo_delta(g, d, h, self.lam, bk, pen_k, cfg.gamma)
        if not delta < 0:
            # d was built to make delta negative; a nonnegative value is rounding
            self.flags["skipped_rounding"] += 1
            return
        if cfg.mode == "exact" or k in self._exact_coords:
            self._armijo_exact(k, d, delta)
        else:
            self._armijo_fixed_u(k, d, delta)

    @staticmethod
    def _slack(base):
        return Q_RESOLUTION * (1.0 + abs(base))

    def _pen_after(self, k, new_bk):
        if not self.mask[k] or self.lam == 0.0:
            return self.obj.penalty
        return self.obj.penalty + self.lam * (abs(new_bk) - abs(self.beta[k]))

    def _accept_beta(self, k, new_bk, xb, pr, obj):
        self.beta[k] = new_bk
        self.xb = xb
        self._commit(("beta", k), pr, obj)

    def _armijo_exact(self, k, d, delta):
        cfg = self.cfg
        xk = self.problem.X[:, k]
        base = self.obj.q_la
        alpha = cfg.alpha_init
        for _ in range(cfg.max_armijo_backtracks + 1):
            new_bk = self.beta[k] + alpha * d
            xb = self.xb + (new_bk - self.beta[k]) * xk
            res = self._solve(xb, self.theta, self.phi, self.pr.u_tilde, self._pen_after(k, new_bk))
            if res is not None and res[1].q_la <= base + alpha * cfg.rho_armijo * delta + self._slack(base):
                self._accept_beta(k, new_bk, xb, *res)
                return True
            alpha *= cfg.delta
        self.flags["armijo_fail"] += 1
        return False

    def _armijo_fixed_u(self, k, d, delta):
        cfg = self.cfg
        problem = self.problem
        xk = problem.X[:, k]
        base = self.obj.q_la
        eta0 = self.pr.eta
        u2 = self.pr.u_norm2
        alpha = cfg.alpha_init
        found = False
        tries = 0
        while tries <= cfg.max_armijo_backtracks:
            tries += 1
            new_bk = self.beta[k] + alpha * d
            dev, logdet = fixed_u_terms(problem, eta0 + (new_bk - self.beta[k]) * xk, self.theta, self.phi)
            val = dev + logdet + u2 + self._pen_after(k, new_bk)
            if math.isfinite(val) and val <= base + alpha * cfg.rho_armijo * delta + self._slack(base):
                found = True
                break
            alpha *= cfg.delta
        if not found:
            self.flags["armijo_fail"] += 1
            self._exact_coords.add(k)
            self._exact_fallback(k)
            return
        # re-solve the mode; a step that raises the exact objective hands the
        # coordinate over to exact updates for the rest of the fit
        new_bk = self.beta[k] + alpha * d
        xb = self.xb + (new_bk - self.beta[k]) * xk
        res = self._solve(xb, self.theta, self.phi, self.pr.u_tilde, self._pen_after(k, new_bk))
        if res is not None and res[1].q_la <= base + self._slack(base):
            self._accept_beta(k, new_bk, xb, *res)
            return
        self.flags["guard_reject"] += 1
        self._exact_coords.add(k)
        self._exact_fallback(k)

    def _exact_fallback(self, k):
        """Exact-gradient step on coordinate k when the fixed-mode step fails.

        Near the fixed point of the approximate iteration the fixed-mode
        direction can increase the exact objective; the exact step keeps the
        descent going (and the coordinate then satisfies the exact
        stationarity condition).
        """
        try:
            g = self._implicit_gradient(k)
        except (np.linalg.LinAlgError, NumericalError):
            return
        pen_k = bool(self.mask[k])
        h = self._curvature(k)
        d = descent_direction(g, h, self.lam, self.beta[k], pen_k)
        if d == 0.0:
            return
        delta = armijo_delta(g, d, h, self.lam, self.beta[k], pen_k, self.cfg.gamma)
        if delta < 0:
            self.flags["exact_fallback"] += 1
            self._armijo_exact(k, d, delta)

    # -- steps (2) and (3): scalar minimisation ----------------------------
    def _scalar_min(self, fun, x0, f0, a, b, lo, hi):
        """Bounded Brent search on [a, b], expanding towards [lo, hi]."""
        tol = self.cfg.scalar_opt_tol
        cache = {float(x0): (f0, None)}

        def F(x):
            x = float(x)
            if x not in cache:
                cache[x] = fun(x)
            return cache[x][0]

        for _ in range(40):
            if b - a <= 2 * tol:
                break
            res = minimize_scalar(F, bounds=(a, b), method="bounded", options={"xatol": tol})
            x, w = float(res.x), b - a
            if b < hi and x > b - 0.1 * w:
                a, b = b - 0.1 * w, min(hi, b + 3.0 * w)
            elif a > lo and x < a + 0.1 * w:
                a, b = max(lo, a - 3.0 * w), a + 0.1 * w
            else:
                break
        if a <= lo and math.isfinite(lo):
            F(lo)
        best = min(cache, key=lambda z: (cache[z][0], abs(z - x0)))
        return best, cache[best]

    def _theta_fun(self, l):
        base = self.theta
        u0 = self.pr.u_tilde

        def fun(x):
            th = base.copy()
            th[l] = x
            res = self._solve(self.xb, th, self.phi, u0, 0.0)
            return (math.inf, None) if res is None else (res[1].f, res)
        return fun

    def update_theta(self, l):
        cfg = self.cfg
        cur = float(self.theta[l])
        if self.diag[l]:
            lo, hi = 0.0, cfg.theta_max
        else:
            lo, hi = -cfg.theta_max, cfg.theta_max
        if not self._theta_seen[l]:
            w = 4.0 * abs(cur) + 1.0
            a, b = (0.0, min(hi, w)) if self.diag[l] else (max(lo, cur - w), min(hi, cur + w))
            self._theta_seen[l] = True
        else:
            w = max(4.0 * abs(self._theta_step[l]), 0.05 * abs(cur), 1e-3)
            a, b = max(lo, cur - w), min(hi, cur + w)
        try:
            x, (fx, res) = self._scalar_min(self._theta_fun(l), cur, self.obj.f, a, b, lo, hi)
        except (ValueError, GLMMLassoError):
            self.flags["scalar_fail"] += 1
            return
        if res is not None and fx < self.obj.f - SCALAR_MIN_DECREASE * max(1.0, abs(self.obj.f)):
            self._theta_step[l] = x - cur
            self.theta[l] = x
            pr, obj = res
            self._commit(("theta", l), pr, ObjectiveValue(obj.f + self.obj.penalty, obj.f, obj.neg2_cond_loglik,
                                                           obj.logdet, obj.u_norm2, self.obj.penalty))
        else:
            self._theta_step[l] = 0.0

    def update_phi(self):
        cfg = self.cfg
        cur = math.log(self.phi)
        lo, hi = math.log(PHI_MIN), math.log(cfg.phi_max)
        u0 = self.pr.u_tilde

        def fun(t):
            res = self._solve(self.xb, self.theta, math.exp(t), u0, 0.0)
            return (math.inf, None) if res is None else (res[1].f, res)

        w = 3.0 if not self._phi_seen else max(4.0 * abs(self._phi_step), 0.05)
        self._phi_seen = True
        a, b = max(lo, cur - w), min(hi, cur + w)
        try:
            t, (ft, res) = self._scalar_min(fun, cur, self.obj.f, a, b, lo, hi)
        except (ValueError, GLMMLassoError):
            self.flags["scalar_fail"] += 1
            return
        if res is not None and ft < self.obj.f - SCALAR_MIN_DECREASE * max(1.0, abs(self.obj.f)):
            self._phi_step = t - cur
            self.phi = math.exp(t)
            pr, obj = res
            self._commit("phi", pr, ObjectiveValue(obj.f + self.obj.penalty, obj.f, obj.neg2_cond_loglik,
                                                   obj.logdet, obj.u_norm2, self.obj.penalty))
        else:
            self._phi_step = 0.0

    def update_covariance(self):
        for l in range(self.problem.d):
            self.update_theta(l)
        if not self.problem.family.dispersion_known:
            self.update_phi()

    # -- convergence -------------------------------------------------------
    def kkt(self):
        return _kkt_state(self.problem, self.beta, self.theta, self.phi, self.pr, self.lam,
                          self.cfg.mode, self.cfg.logdet_in_grad)

    def state(self):
        return ParamState(self.beta.copy(), self.theta.copy(), self.phi, self.mask.copy())


def fit(problem, lam, config=None, start=None, u_start=None):
    """Minimise the Laplace-approximated lasso objective at one lambda.

    Parameters
    ----------
    problem : GLMMProblem
    lam : float
        Penalty level (>= 0) on the -2 log-likelihood scale.
    config : OptimizerConfig, optional
    start : ParamState, optional
        Starting values; :func:`init_start` is used when omitted.
    u_start : array, optional
        Warm start for the random-effects mode.

    Returns
    -------
    FitRecord
        ``converged`` is False when ``max_outer_iter`` is exhausted.
    """
    cfg = config or OptimizerConfig()
    if not lam >= 0:
        raise InvalidInputError("lambda must be nonnegative")
    if start is None:
        start = init_start(problem, cfg)
    st = _Fit(problem, lam, cfg, start, u_start)
    trace = [st.obj.q_la]
    q_prev = st.obj.q_la
    p = problem.p
    D = cfg.active_set_period
    force_full = True
    converged = False
    worst = math.nan
    s = 0
    for s in range(1, cfg.max_outer_iter + 1):
        full = force_full or (s - 1) % D == 0
        force_full = False
        before = frozenset(np.flatnonzero(st.beta).tolist())
        if full:
            coords = range(p)
        else:
            coords = [k for k in range(p) if not st.mask[k] or st.beta[k] != 0.0]
        for k in coords:
            st.update_beta(k)
        st.update_covariance()
        q = st.obj.q_la
        trace.append(q)
        small = abs(q_prev - q) <= cfg.outer_tol * (1.0 + abs(q))
        q_prev = q
        if not small:
            continue
        after = frozenset(np.flatnonzero(st.beta).tolist())
        if not cfg.kkt_check:
            if full and after == before:
                converged = True
                break
            force_full = True
            continue
        viol = st.kkt()
        worst = float(viol.max()) if viol.size else 0.0
        tol = kkt_tolerance(st.lam)
        if worst <= tol and full and after == before:
            converged = True
            break
        # a zero coordinate leaving the dead zone needs a full sweep
        bad_zero = np.any((viol > tol) & st.mask & (st.beta == 0))
        if bad_zero or after != before or worst <= tol:
            force_full = True
    if not math.isfinite(worst) or not converged:
        viol = st.kkt()
        worst = float(viol.max()) if viol.size else 0.0
    return FitRecord(st.state(), st.pr.u_tilde.copy(), st.obj.q_la, st.obj, st.lam, s, converged, trace,
                     cfg.mode, worst <= kkt_tolerance(st.lam), worst, dict(st.flags), st.updates)


def init_start(problem, config=None, seed=0):
    """Starting values from a cross-validated lasso GLM.

    beta comes from a 5-fold CV lasso GLM without random effects; theta
    starts at the template default and receives one pass of the scalar
    theta (and phi) updates at that beta.
    """
    cfg = config or OptimizerConfig()
    fam = problem.family
    glm_fam = fam if fam.dispersion_known else make_family(fam.name, phi=1.0)
    X, y = problem.X, problem.y
    fitg = cv_glm_lasso(X, y, glm_fam, problem.penalty_mask, seed=seed, phi=glm_fam.phi_fixed)
    beta = fitg.beta
    if fam.dispersion_known:
        phi = fam.phi_fixed
    else:
        resid = y - X @ beta
        phi = max(float(resid @ resid) / max(problem.n - np.count_nonzero(beta), 1), 1e-6)
    psi = ParamState(beta, problem.template.default_theta(), phi, problem.penalty_mask)
    st = _Fit(problem, 0.0, cfg, psi)
    st.update_covariance()
    return st.state()


def null_start(problem, config=None):
    """Starting values with every penalized coefficient at zero."""
    start = init_start(problem, config)
    fam = problem.family
    glm_fam = fam if fam.dispersion_known else make_family(fam.name, phi=1.0)
    beta = null_fit(problem.X, problem.y, glm_fam, problem.penalty_mask, glm_fam.phi_fixed).beta
    return ParamState(beta, start.theta, start.phi, problem.penalty_mask)
