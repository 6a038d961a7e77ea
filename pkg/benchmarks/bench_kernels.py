"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--n-groups 40] [--group-size 10] [--repeat 200]

Prints one line per kernel with the per-call time of both variants, the
speed-up and the largest absolute difference of their outputs.
"""
import argparse
import timeit

import numpy as np

from glmmlasso import kernels
from glmmlasso.model import CovarianceTemplate, CovBlock, Dataset
from glmmlasso.pirls import ETA_TOL, GRAD_TOL, LOOSE_GRAD_TOL
from glmmlasso.problem import GLMMProblem


def make_case(n_groups, group_size, p, seed=0):
    rng = np.random.default_rng(seed)
    n = n_groups * group_size
    X = np.c_[np.ones(n), rng.standard_normal((n, p - 1))]
    g = np.repeat(np.arange(n_groups), group_size)
    b = rng.standard_normal((n_groups, 2))
    eta = 0.3 * X[:, 1] - 0.3 * X[:, 2] + b[g, 0] + b[g, 1] * X[:, 1]
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    ds = Dataset.create(y, X, [g], [[0, 1]])
    problem = GLMMProblem(ds, CovarianceTemplate((CovBlock(0, (0, 1)),)), "bernoulli")
    return problem, rng


def cases(problem, rng):
    theta = np.array([1.0, 0.7])
    lay = problem.structure.layouts[0]
    m = problem.zl_rows(theta)[0]
    xb = np.ascontiguousarray(problem.X @ np.r_[0.1, 0.3, -0.3, np.zeros(problem.p - 3)])
    y, c_y = problem.y, problem.c_y(1.0)
    u0 = np.zeros(problem.q)
    out = kernels.pirls_block_nb(0, xb, y, c_y, 1.0, lay.order, lay.ptr, m, u0, 100, ETA_TOL, GRAD_TOL,
                                 LOOSE_GRAD_TOL)
    eta, mu, w = out[1], out[2], out[3]
    X = np.asfortranarray(problem.X)
    z = eta + (y - mu) / w
    pen = np.full(problem.p, 5.0)
    return {
        "pirls_block (cold start)": (
            (kernels.pirls_block_nb, kernels.pirls_block_np),
            (0, xb, y, c_y, 1.0, lay.order, lay.ptr, m, u0, 100, ETA_TOL, GRAD_TOL, LOOSE_GRAD_TOL),
            lambda r: r[0]),
        "pirls_block (warm start)": (
            (kernels.pirls_block_nb, kernels.pirls_block_np),
            (0, xb + 1e-3 * X[:, 3], y, c_y, 1.0, lay.order, lay.ptr, m, out[0], 100, ETA_TOL, GRAD_TOL,
             LOOSE_GRAD_TOL),
            lambda r: r[0]),
        "fixed_u_terms": (
            (kernels.fixed_u_terms_nb, kernels.fixed_u_terms_np),
            (0, eta, y, c_y, 1.0, lay.order, lay.ptr, m),
            lambda r: np.array(r)),
        "leverage_block": (
            (kernels.leverage_block_nb, kernels.leverage_block_np),
            (w, lay.order, lay.ptr, m),
            lambda r: r),
        "logdet_score_block": (
            (kernels.logdet_score_block_nb, kernels.logdet_score_block_np),
            (0, mu, w, lay.order, lay.ptr, m, True),
            lambda r: r),
        "wls_lasso_cd": (
            (kernels.wls_lasso_cd_nb, kernels.wls_lasso_cd_np),
            (X, w, z, None, pen, 500, 1e-10),
            None),
    }


def run(n_groups, group_size, p, repeat):
    problem, rng = make_case(n_groups, group_size, p)
    print(f"n={problem.n} (groups {n_groups} x {group_size}), p={problem.p}, k=2, {repeat} calls per timing")
    print(f"{'kernel':<26s}{'numba us':>12s}{'numpy us':>12s}{'speed-up':>10s}{'max |diff|':>12s}")
    for name, (fns, args, key) in cases(problem, rng).items():
        times, outs = [], []
        for fn in fns:
            if name == "wls_lasso_cd":
                def call(fn=fn):
                    b = np.zeros(problem.p)
                    fn(args[0], args[1], args[2], b, *args[4:])
                    return b
                fn_call = call
            else:
                def fn_call(fn=fn):
                    return fn(*args)
            res = fn_call()  # compile / warm up
            outs.append(res if key is None else key(res))
            times.append(min(timeit.repeat(fn_call, number=repeat, repeat=3)) / repeat * 1e6)
        diff = float(np.max(np.abs(np.asarray(outs[0]) - np.asarray(outs[1]))))
        print(f"{name:<26s}{times[0]:12.1f}{times[1]:12.1f}{times[1] / times[0]:10.1f}{diff:12.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-groups", type=int, default=40)
    ap.add_argument("--group-size", type=int, default=10)
    ap.add_argument("--p", type=int, default=150)
    ap.add_argument("--repeat", type=int, default=200)
    a = ap.parse_args()
    run(a.n_groups, a.group_size, a.p, a.repeat)


if __name__ == "__main__":
    main()
