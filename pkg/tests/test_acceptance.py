"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Studies are computed once per module with ``workers=1``; the determinism
criterion reruns them with ``workers=2`` and compares the rendered tables.
"""
import time

import numpy as np
import pytest

from glmmlasso.optimizer import OptimizerConfig, descent_direction, fit
from glmmlasso.quadrature import gh_loglik, gh_mle
from glmmlasso.selection import lambda_max
from glmmlasso.simulate import (SimDesign, compare_study, design, generate, growing_p, problem_for,
                                replicate_rng, run_study)

SEED = 2024
RERUN_WORKERS = 2

pytestmark = pytest.mark.slow


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def timed(fn, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t


# ---------------------------------------------------------------------------
# shared computations
# ---------------------------------------------------------------------------

def _random_instances(n_instances=50):
    """Alternating logistic / Poisson problems with n <= 400 and p <= 50."""
    out = []
    for i in range(n_instances):
        rng = np.random.default_rng([7, i])
        fam = "bernoulli" if i % 2 == 0 else "poisson"
        N, p = int(rng.integers(10, 41)), int(rng.integers(5, 51))
        beta = (0.0, 1.0, -1.0, 1.0, -1.0) if fam == "bernoulli" else (0.0, 0.5, -0.5, 0.5, -0.5)
        d = SimDesign(f"random_{i}", fam, N, 10, p, beta[:min(5, p)])
        ds, _ = generate(d, replicate_rng(SEED, i))
        out.append((problem_for(d, ds), rng.uniform(0.05, 0.5)))
    return out


@pytest.fixture(scope="module")
def monotone_fits():
    def run():
        cfg = OptimizerConfig(record_updates=True)
        return [fit(pb, lambda_max(pb, cfg)[0] * frac, cfg) for pb, frac in _random_instances()]
    return timed(run)


@pytest.fixture(scope="module")
def quadrature_runs():
    def run():
        cfg = OptimizerConfig(mode="exact")
        d = SimDesign("ri_logistic", "bernoulli", 10, 5, 3, (0.0, 1.0, -1.0))
        rows = []
        for r in range(10):
            ds, _ = generate(d, replicate_rng(SEED, r))
            pb = problem_for(d, ds)
            rec = fit(pb, 0.0, cfg)
            ll = gh_loglik(pb, rec.beta, rec.theta, 1.0, 40)
            beta_gh, _, _ = gh_mle(pb, rec.beta, rec.theta)
            rows.append((rec, abs(rec.f + 2 * ll) / abs(2 * ll), float(np.max(np.abs(rec.beta - beta_gh)))))
        return rows
    return timed(run)


def _h1_study(workers):
    return run_study(design("logistic_H1"), ("glmmlasso", "hybrid"), 20, seed=SEED, workers=workers)


def _l1_compare(workers):
    return compare_study(design("logistic_L1"), 10, seed=SEED, workers=workers)


def _poisson_study(workers):
    return run_study(design("poisson_L1"), ("glmmlasso",), 20, seed=SEED, workers=workers)


def _growing(workers):
    return growing_p(n_replicates=10, seed=SEED, workers=workers)


@pytest.fixture(scope="module")
def h1_study():
    return timed(_h1_study, 1)


@pytest.fixture(scope="module")
def l1_compare():
    return timed(_l1_compare, 1)


@pytest.fixture(scope="module")
def poisson_study():
    return timed(_poisson_study, 1)


@pytest.fixture(scope="module")
def growing():
    return timed(_growing, 1)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

class TestAcceptance:
    def test_01_soft_threshold(self, capsys):
        rng = np.random.default_rng(SEED)
        g = rng.uniform(-3, 3, 1000)
        h = rng.uniform(1, 10, 1000)
        lam = rng.uniform(0, 1, 1000)
        beta = rng.uniform(-2, 2, 1000)
        t = time.perf_counter()
        worst = 0.0
        for gi, hi, li, bi in zip(g, h, lam, beta):
            d = descent_direction(gi, hi, li, bi)
            # the minimiser lies in [(-g - lam)/h, (-g + lam)/h]
            grid = np.arange((-gi - li) / hi - 1e-3, (-gi + li) / hi + 1e-3, 1e-4)
            vals = gi * grid + 0.5 * hi * grid ** 2 + li * np.abs(bi + grid)
            worst = max(worst, abs(d - grid[np.argmin(vals)]))
        elapsed = time.perf_counter() - t
        ok = worst <= 2e-4 and elapsed < 1.0
        report(capsys, 1, ok, f"max |d - brute force| = {worst:.2e} (<= 2e-4), {elapsed:.2f} s (< 1 s)")
        assert worst <= 2e-4
        assert elapsed < 1.0

    def test_02_monotone_descent(self, capsys, monotone_fits):
        fits, elapsed = monotone_fits
        rises = []
        for rec in fits:
            q = np.array([v for _, v in rec.update_trace] if rec.update_trace else rec.trace)
            rises.append(max(np.max(np.diff(q)) if q.size > 1 else 0.0,
                             np.max(np.diff(rec.trace)) if len(rec.trace) > 1 else 0.0))
        worst = max(rises)
        ok = worst <= 1e-10 and elapsed < 120
        report(capsys, 2, ok, f"{len(fits)} fits, largest step increase {worst:.2e} (<= 1e-10), {elapsed:.0f} s")
        assert worst <= 1e-10
        assert elapsed < 120

    def test_03_laplace_vs_quadrature(self, capsys, quadrature_runs):
        rows, elapsed = quadrature_runs
        rel = max(r[1] for r in rows)
        dbeta = np.array([r[2] for r in rows])
        ok = rel <= 0.03 and dbeta.max() <= 1e-2 and elapsed < 60
        report(capsys, 3, ok, f"max rel -2logL gap {rel:.4f} (<= 0.03), max |beta - beta_GH| {dbeta.max():.4f} "
                              f"(<= 1e-2, {np.sum(dbeta > 1e-2)}/{len(rows)} over), {elapsed:.0f} s")
        assert rel <= 0.03
        assert elapsed < 60
        assert dbeta.max() <= 1e-2

    def test_04_shrinkage_bias(self, capsys, h1_study):
        study, elapsed = h1_study
        th_l = np.median(study.values("glmmlasso", "var", 0))
        th_h = np.median(study.values("hybrid", "var", 0))
        se_l = np.median(study.values("glmmlasso", "se"))
        se_h = np.median(study.values("hybrid", "se"))
        ok = th_l <= 0.6 and 0.6 <= th_h <= 1.3 and se_h < se_l and elapsed < 900
        report(capsys, 4, ok, f"theta1^2 glmmlasso {th_l:.3f} (<= 0.6), hybrid {th_h:.3f} (in [0.6, 1.3]); "
                              f"SE hybrid {se_h:.3f} < glmmlasso {se_l:.3f}; {elapsed:.0f} s")
        assert th_l <= 0.6
        assert 0.6 <= th_h <= 1.3
        assert se_h < se_l
        assert elapsed < 900

    def test_05_screening(self, capsys, h1_study):
        study, _ = h1_study
        tp = study.values("glmmlasso", "tp")
        s0 = study.design.s0
        med, frac = np.median(tp), np.mean(tp == s0)
        ok = med == s0 and frac >= 0.8
        report(capsys, 5, ok, f"median TP {med:g} (= {s0}), all found in {frac:.0%} of replicates (>= 80%)")
        assert med == s0
        assert frac >= 0.8

    def test_06_exact_vs_approximate(self, capsys, l1_compare):
        res, elapsed = l1_compare
        ll, fx, act = res.mean("rel_ll"), res.mean("rel_fix"), res.mean("active_set_match")
        ok = ll <= 5e-3 and fx <= 0.05 and act >= 0.85 and elapsed < 600
        report(capsys, 6, ok, f"rel.ll {ll:.2e} (<= 5e-3), rel.fix {fx:.3f} (<= 0.05), active set {act:.3f} "
                              f"(>= 0.85); {res.timing_text().strip()}; {elapsed:.0f} s")
        assert ll <= 5e-3
        assert fx <= 0.05
        assert act >= 0.85
        assert elapsed < 600

    def test_07_poisson_no_shrinkage(self, capsys, poisson_study):
        study, elapsed = poisson_study
        th = np.median(study.values("glmmlasso", "var", 0))
        ok = 0.6 <= th <= 1.2 and elapsed < 600
        report(capsys, 7, ok, f"glmmlasso median theta^2 {th:.3f} (in [0.6, 1.2]), {elapsed:.0f} s")
        assert 0.6 <= th <= 1.2
        assert elapsed < 600

    def test_08_growing_p(self, capsys, growing):
        series, elapsed = growing
        ml = series.median("full_ml", 65) / series.median("full_ml", 5) - 1
        hyb = abs(series.median("hybrid", 65) / series.median("hybrid", 5) - 1)
        ok = ml >= 0.2 and hyb <= 0.1 and elapsed < 900
        report(capsys, 8, ok, f"full ML p=65 vs p=5 +{ml:.1%} (>= 20%), hybrid {hyb:.1%} (<= 10%), {elapsed:.0f} s")
        assert ml >= 0.2
        assert hyb <= 0.1
        assert elapsed < 900

    def test_09_kkt_certificate(self, capsys, monotone_fits, quadrature_runs, h1_study, l1_compare,
                                poisson_study, growing):
        flags = {}
        flags[2] = [r.kkt_ok for r in monotone_fits[0] if r.converged]
        flags[3] = [r[0].kkt_ok for r in quadrature_runs[0] if r[0].converged]
        for n, (study, _) in ((4, h1_study), (7, poisson_study)):
            f = []
            for rep in study.replicates:
                f += rep.get("_path", {}).get("kkt_ok", [])
                f += [rep[m]["kkt_ok"] for m in study.methods if rep[m].get("converged")]
            flags[n] = f
        flags[6] = [k for run in l1_compare[0].runs for k in run["kkt_ok"]]
        flags[8] = [k for runs in growing[0].runs.values() for r in runs for k in r["_kkt"]]
        total = sum(len(v) for v in flags.values())
        bad = {n: len(v) - sum(v) for n, v in flags.items() if len(v) - sum(v)}
        report(capsys, 9, not bad, f"{total} converged fits checked, failures by criterion: {bad or 'none'}")
        assert all(len(v) for v in flags.values())
        assert not bad

    def test_10_determinism(self, capsys, h1_study, l1_compare, poisson_study, growing):
        pairs = {
            "logistic_H1": (h1_study[0], _h1_study(RERUN_WORKERS)),
            "logistic_L1 compare": (l1_compare[0], _l1_compare(RERUN_WORKERS)),
            "poisson_L1": (poisson_study[0], _poisson_study(RERUN_WORKERS)),
            "growing_p": (growing[0], _growing(RERUN_WORKERS)),
        }
        differ = [k for k, (a, b) in pairs.items()
                  if a.to_csv().encode() != b.to_csv().encode() or a.to_text().encode() != b.to_text().encode()]
        report(capsys, 10, not differ, f"workers=1 vs workers={RERUN_WORKERS}: "
                                       f"{'identical tables' if not differ else 'differ: ' + ', '.join(differ)}")
        assert not differ
