import math
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.optimize import brentq

from glmmlasso import _accel, kernels
from glmmlasso.errors import ConvergenceError
from glmmlasso.model import CovarianceTemplate, CovBlock, Dataset
from glmmlasso.pirls import (_pirls_dense, leverages, s_grad, s_value, solve_mode,
                             system_matrix)
from glmmlasso.problem import GLMMProblem

from conftest import make_problem


def _two_obs_problem():
    ds = Dataset.create([1.0, 1.0], np.ones((2, 1)), [np.zeros(2, dtype=int)], [[0]])
    return GLMMProblem(ds, None, "bernoulli")


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def backend(request):
    prev = _accel.set_numba(request.param)
    yield request.param
    _accel.set_numba(prev)


class TestClosedForms:
    def test_gaussian_ridge_one_step(self, backend):
        ds = Dataset.create([2.0, 0.0], np.ones((2, 1)), [np.array([0, 1])], [[0]])
        pb = GLMMProblem(ds, None, "gaussian")
        pr = solve_mode(pb, [0.0], [1.0], 1.0)
        np.testing.assert_allclose(pr.u_tilde, [1.0, 0.0], atol=1e-10)
        assert pr.iterations <= 1

    def test_gaussian_random_design(self, backend):
        pb = make_problem("gaussian", N=6, n_C=4, p=3, slope=True, seed=5)
        beta, theta = np.array([0.3, -0.2, 0.1]), np.array([0.8, 0.5])
        pr = solve_mode(pb, beta, theta, 1.3)
        M = pb.zl_matrix(theta).toarray()
        r = pb.y - pb.X @ beta
        ridge = np.linalg.solve(M.T @ M + 1.3 * np.eye(pb.q), M.T @ r)
        np.testing.assert_allclose(pr.u_tilde, ridge, atol=1e-10)
        assert pr.iterations == 1

    def test_zero_theta(self, backend):
        pb = make_problem("bernoulli", seed=2)
        pr = solve_mode(pb, np.zeros(pb.p), [0.0])
        np.testing.assert_array_equal(pr.u_tilde, 0.0)
        assert pr.iterations <= 1
        assert pr.logdet == 0.0

    def test_single_group_bernoulli(self, backend):
        # S'(u) = -2 (1 - sigmoid(u)) + u; oracle by bracketing root finder
        root = brentq(lambda u: -2 * (1 - 1 / (1 + math.exp(-u))) + u, 0.0, 3.0, xtol=1e-14)
        pr = solve_mode(_two_obs_problem(), [0.0], [1.0])
        assert pr.u_tilde[0] == pytest.approx(root, abs=1e-10)
        assert pr.u_tilde[0] == pytest.approx(0.6748316143, abs=1e-9)


class TestSValue:
    def test_s_at_zero(self):
        ds = Dataset.create([1.0, 0.0], np.ones((2, 1)), [np.zeros(2, dtype=int)], [[0]])
        pb = GLMMProblem(ds, None, "bernoulli")
        assert s_value(pb, np.zeros(1), [0.0], [1.0]) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_gaussian_gradient_at_zero(self):
        pb = make_problem("gaussian", N=4, n_C=3, p=3, seed=1)
        beta, theta, phi = np.array([0.1, 0.2, 0.3]), np.array([0.7]), 2.0
        M = pb.zl_matrix(theta).toarray()
        expected = -M.T @ (pb.y - pb.X @ beta) / phi
        np.testing.assert_allclose(s_grad(pb, np.zeros(pb.q), beta, theta, phi), expected, atol=1e-12)

    def test_gradient_finite_differences(self):
        pb = make_problem("bernoulli", N=5, n_C=4, p=3, slope=True, seed=7)
        rng = np.random.default_rng(0)
        u = rng.standard_normal(pb.q)
        beta, theta = np.array([0.2, -0.1, 0.4]), np.array([1.1, 0.6])
        h = 1e-6
        fd = np.array([(s_value(pb, u + h * e, beta, theta) - s_value(pb, u - h * e, beta, theta)) / (2 * h)
                       for e in np.eye(pb.q)])
        np.testing.assert_allclose(s_grad(pb, u, beta, theta), fd, atol=1e-6)


class TestConvergence:
    @pytest.mark.parametrize("family", ["bernoulli", "poisson"])
    def test_gradient_certificate(self, backend, family):
        pb = make_problem(family, N=12, n_C=6, p=4, slope=True, seed=3)
        beta, theta = np.array([0.1, 0.5, -0.3, 0.0]), np.array([1.5, 0.8])
        pr = solve_mode(pb, beta, theta)
        assert pr.converged
        g = s_grad(pb, pr.u_tilde, beta, theta)
        assert np.max(np.abs(g)) <= 1e-8 * (1 + np.max(np.abs(pr.u_tilde)))
        assert np.all(pr.W > 0)

    def test_warm_start_idempotent(self, backend):
        pb = make_problem("bernoulli", N=10, n_C=5, seed=4)
        beta, theta = np.array([0.2, 0.5, -0.4, 0.1]), np.array([1.3])
        pr = solve_mode(pb, beta, theta)
        again = solve_mode(pb, beta, theta, u_start=pr.u_tilde)
        assert again.iterations <= 1
        np.testing.assert_allclose(again.u_tilde, pr.u_tilde, atol=1e-12)

    def test_budget_exhaustion_raises(self):
        pb = make_problem("poisson", N=10, n_C=5, seed=4)
        with pytest.raises(ConvergenceError):
            solve_mode(pb, np.array([2.0, 1.0, -1.0, 0.5]), [3.0], max_iter=1)

    def test_s_decreases_along_iterates(self):
        pb = make_problem("bernoulli", N=8, n_C=5, seed=6)
        beta, theta = np.array([0.2, 1.5, -1.0, 0.3]), np.array([2.0])
        values, u = [], np.zeros(pb.q)
        for it in range(1, 8):
            pr = solve_mode(pb, beta, theta, max_iter=it, raise_on_failure=False, grad_tol=0.0)
            values.append(s_value(pb, pr.u_tilde, beta, theta))
        assert np.all(np.diff(values) <= 1e-12)


class TestBlockStructure:
    @pytest.mark.parametrize("family", ["bernoulli", "poisson", "gaussian"])
    def test_block_equals_dense(self, family):
        pb = make_problem(family, N=9, n_C=5, p=4, slope=True, seed=8, structure="unstructured_lower")
        beta, theta = np.array([0.1, 0.3, -0.2, 0.2]), np.array([1.0, 0.4, 0.6])
        phi = 1.0
        pr = solve_mode(pb, beta, theta, phi)
        u, _, _, w, dev, logdet, *_ = _pirls_dense(pb, pb.X @ beta, theta, phi, np.zeros(pb.q), 100, 1e-13)
        np.testing.assert_allclose(pr.u_tilde, u, atol=1e-10)
        assert pr.deviance == pytest.approx(dev, abs=1e-10)
        sign, ld = np.linalg.slogdet(system_matrix(pb, theta, pr.W))
        assert sign > 0 and pr.logdet == pytest.approx(ld, abs=1e-10) and logdet == pytest.approx(ld, abs=1e-10)

    def test_system_block_diagonal(self):
        pb = make_problem("bernoulli", N=4, n_C=3, slope=True, seed=1)
        H = system_matrix(pb, np.array([1.0, 0.5]), np.full(pb.n, 0.2))
        mask = np.kron(np.eye(4), np.ones((2, 2))).astype(bool)
        assert np.all(H[~mask] == 0)

    def test_leverages_match_dense(self, backend):
        pb = make_problem("bernoulli", N=6, n_C=4, slope=True, seed=2)
        theta, W = np.array([0.9, 0.4]), np.random.default_rng(0).uniform(0.05, 0.25, pb.n)
        M = pb.zl_matrix(theta).toarray()
        H = M.T @ (W[:, None] * M) + np.eye(pb.q)
        expected = np.einsum("ij,ji->i", M, np.linalg.solve(H, M.T))
        np.testing.assert_allclose(leverages(pb, theta, W), expected, atol=1e-12)

    def test_two_factors_dense_path(self):
        rng = np.random.default_rng(0)
        n = 40
        X = np.c_[np.ones(n), rng.standard_normal(n)]
        g1, g2 = np.repeat(np.arange(8), 5), np.tile(np.arange(5), 8)
        y = rng.poisson(np.exp(0.3 + rng.standard_normal(8)[g1] * 0.5)).astype(float)
        ds = Dataset.create(y, X, [g1, g2], [[0], [0]])
        pb = GLMMProblem(ds, CovarianceTemplate((CovBlock(0, (0,)), CovBlock(1, (0,)))), "poisson")
        beta, theta = np.array([0.3, 0.1]), np.array([0.5, 0.3])
        pr = solve_mode(pb, beta, theta)
        assert pr.converged and pb.q == 13
        assert np.max(np.abs(s_grad(pb, pr.u_tilde, beta, theta))) <= 1e-8


class TestKernels:
    def test_numba_matches_numpy(self):
        pb = make_problem("poisson", N=15, n_C=6, p=5, slope=True, seed=9)
        lay = pb.structure.layouts[0]
        theta = np.array([0.8, 0.5])
        m = pb.zl_rows(theta)[0]
        xb = pb.X @ np.array([0.2, 0.3, -0.1, 0.0, 0.1])
        args = (pb.family.code, xb, pb.y, pb.c_y(1.0), 1.0, lay.order, lay.ptr, m, np.zeros(pb.q),
                100, 1e-8, 1e-13, 1e-6)
        a = kernels.pirls_block_nb(*args)
        b = kernels.pirls_block_np(*args)
        for x, y in zip(a[:6], b[:6]):
            np.testing.assert_allclose(x, y, atol=1e-10)
        for code in (0, 1, 2):
            mu = np.clip(np.exp(xb) / (1 + np.exp(xb)), 0.05, 0.95)
            w = mu * (1 - mu)
            np.testing.assert_allclose(kernels.logdet_score_block_nb(code, mu, w, lay.order, lay.ptr, m, True),
                                       kernels.logdet_score_block_np(code, mu, w, lay.order, lay.ptr, m, True),
                                       atol=1e-12)

    @pytest.mark.parametrize("value,expected", [("0", False), ("off", False), ("1", True)])
    def test_env_flag(self, value, expected):
        code = "from glmmlasso import _accel; print(_accel.numba_enabled())"
        env = dict(os.environ, GLMMLASSO_NUMBA=value)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == str(expected and _accel.HAVE_NUMBA)
