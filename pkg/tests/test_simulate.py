import math

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import multivariate_normal

from glmmlasso.errors import InvalidInputError, UnsupportedModelError
from glmmlasso.family import make_family
from glmmlasso.glm_lasso import glm_lasso
from glmmlasso.model import CovarianceTemplate, CovBlock, Dataset
from glmmlasso.problem import GLMMProblem
from glmmlasso.quadrature import gh_loglik
from glmmlasso.simulate import (DESIGN_NAMES, SimDesign, design, gen_design_matrix, generate, mad,
                                replicate_rng, run_replicate, run_study)

from conftest import make_problem


class TestDesignMatrix:
    def test_independent_columns(self):
        X = gen_design_matrix(200, 10, 6, 0.0, replicate_rng(0, 0))
        C = np.corrcoef(X[:, 1:].T)
        assert np.max(np.abs(C - np.eye(5))) <= 0.1
        np.testing.assert_array_equal(X[:, 0], 1.0)

    def test_ar1_correlations(self):
        X = gen_design_matrix(500, 10, 8, 0.2, replicate_rng(1, 0))
        C = np.corrcoef(X[:, 1:].T)
        lag1 = np.diag(C, 1)
        lag2 = np.diag(C, 2)
        assert np.all(np.abs(lag1 - 0.2) <= 0.05)
        assert np.all(np.abs(lag2 - 0.04) <= 0.05)
        np.testing.assert_allclose(X[:, 1:].std(0), 1.0, atol=0.05)


class TestResponse:
    def test_theta_zero_is_glm(self):
        d = SimDesign("custom", "bernoulli", 200, 10, 4, (0.3, 0.8, -0.5, 0.4), re_var=(0.0,))
        ds, b = generate(d, replicate_rng(2, 0))
        assert np.all(b == 0)
        fam = make_family("bernoulli")
        beta = glm_lasso(ds.X, ds.y, fam, 0.0).beta
        mu = expit(ds.X @ beta)
        se = np.sqrt(np.diag(np.linalg.inv(ds.X.T @ (ds.X * (mu * (1 - mu))[:, None]))))
        assert np.all(np.abs(beta - d.beta0) <= 3 * se)

    def test_logistic_h1_marginal_mean(self):
        d = SimDesign("custom", "bernoulli", 400, 10, 6, (0.1, 1.0, -1.0, 1.0, -1.0),
                      re_var=(1.0, 1.0), re_columns=(0, 1))
        ds, _ = generate(d, replicate_rng(3, 0))
        # Monte-Carlo oracle of P(y = 1) over x and b
        rng = np.random.default_rng(99)
        V = 0.2 ** np.abs(np.subtract.outer(np.arange(5), np.arange(5)))
        x = multivariate_normal(np.zeros(5), V).rvs(200000, random_state=rng)
        b = rng.standard_normal((200000, 2))
        eta = 0.1 + x[:, :4] @ np.array([1.0, -1.0, 1.0, -1.0]) + b[:, 0] + b[:, 1] * x[:, 0]
        assert abs(ds.y.mean() - expit(eta).mean()) <= 0.05

    def test_poisson_l1_mean(self):
        d = design("poisson_L1")
        d.N = 5000
        ds, b = generate(d, replicate_rng(4, 0))
        # conditional on the drawn effects the counts average exp(eta)
        g = np.repeat(np.arange(d.N), d.n_C)
        assert ds.y.mean() == pytest.approx(np.exp(ds.X @ d.beta0 + b[g, 0]).mean(), rel=0.02)
        rng = np.random.default_rng(5)
        V = 0.2 ** np.abs(np.subtract.outer(np.arange(9), np.arange(9)))
        x = multivariate_normal(np.zeros(9), V).rvs(200000, random_state=rng)
        eta = x @ d.beta0[1:] + d.beta0[0] + rng.standard_normal(200000)
        assert ds.y.mean() == pytest.approx(np.exp(eta).mean(), rel=0.05)

    def test_correlated_random_effects(self):
        d = design("logistic_H1_corr", p=10)
        d.N = 4000
        _, b = generate(d, replicate_rng(6, 0))
        assert np.corrcoef(b.T)[0, 1] == pytest.approx(0.5, abs=0.05)


class TestDesigns:
    def test_named_designs(self):
        for name in DESIGN_NAMES:
            d = design(name)
            assert d.n == d.N * d.n_C and d.beta0.size == d.p
        h1 = design("logistic_H1")
        assert (h1.N, h1.n_C, h1.p, h1.s0) == (40, 10, 150, 5)
        assert design("logistic_H1", desk=False).p == 500
        h3 = design("poisson_H3", desk=False)
        assert (h3.N, h3.n_C, h3.n, h3.p, h3.re_var) == (30, 10, 300, 500, (0.25,))

    def test_unknown_design(self):
        with pytest.raises(InvalidInputError, match="valid"):
            design("logistic_H9")

    def test_mad(self):
        assert mad([1.0, 2.0, 3.0, 4.0, 100.0]) == pytest.approx(1.4826)
        assert math.isnan(mad([]))


class TestDeterminism:
    def test_same_seed_same_data(self):
        d = design("logistic_L1")
        a, _ = generate(d, replicate_rng(7, 3))
        b, _ = generate(d, replicate_rng(7, 3))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)
        c, _ = generate(d, replicate_rng(7, 4))
        assert not np.array_equal(a.y, c.y)

    def test_tables_independent_of_workers(self):
        d = SimDesign("custom", "bernoulli", 15, 8, 6, (0.1, 1.0, -1.0))
        one = run_study(d, ("oracle", "glmmlasso", "glm_lasso"), 3, seed=5, workers=1)
        two = run_study(d, ("oracle", "glmmlasso", "glm_lasso"), 3, seed=5, workers=2)
        assert one.to_csv() == two.to_csv()
        assert one.to_text() == two.to_text()
        assert one.values("oracle", "tp").tolist() == [3, 3, 3]

    def test_unknown_method(self):
        with pytest.raises(InvalidInputError):
            run_study(design("logistic_L1"), ("lasso9",), 1)

    def test_replicate_records_path(self):
        d = SimDesign("custom", "poisson", 12, 8, 5, (0.2, 0.5, -0.5))
        out = run_replicate(d, ("glmmlasso", "hybrid"), 0, 0)
        assert all(out["_path"]["converged"]) and all(out["_path"]["kkt_ok"])
        assert out["hybrid"]["tp"] <= 3


class TestQuadrature:
    def _gaussian(self, slope=False):
        pb = make_problem("gaussian", N=6, n_C=4, p=3, slope=slope, seed=3)
        return GLMMProblem(pb.dataset, pb.template, make_family("gaussian", phi=1.0))

    @pytest.mark.parametrize("slope", [False, True])
    def test_gaussian_closed_form(self, slope):
        pb = self._gaussian(slope)
        beta = np.array([0.1, 0.4, -0.2])
        theta = np.array([0.8, 0.5]) if slope else np.array([0.8])
        M = pb.zl_matrix(theta).toarray()
        V = np.eye(pb.n) + M @ M.T
        exact = multivariate_normal(pb.X @ beta, V).logpdf(pb.y)
        assert gh_loglik(pb, beta, theta, 1.0, 20) == pytest.approx(exact, abs=1e-10)

    def test_theta_zero_is_glm(self):
        pb = make_problem("bernoulli", seed=2)
        beta = np.array([0.1, 0.4, -0.2, 0.3])
        glm = -0.5 * make_family("bernoulli").neg2_loglik_eta(pb.y, pb.X @ beta).sum()
        assert gh_loglik(pb, beta, [0.0]) == pytest.approx(glm, abs=1e-10)

    def test_node_doubling(self):
        pb = make_problem("bernoulli", N=10, n_C=5, p=3, seed=4)
        beta, theta = np.array([0.2, 0.5, -0.5]), np.array([1.0])
        assert gh_loglik(pb, beta, theta, 1.0, 20) == pytest.approx(gh_loglik(pb, beta, theta, 1.0, 60), abs=1e-8)

    def test_unsupported(self):
        rng = np.random.default_rng(0)
        X = np.c_[np.ones(12), rng.standard_normal(12)]
        ds = Dataset.create((rng.random(12) < 0.5) * 1.0, X, [np.repeat(np.arange(3), 4), np.tile([0, 1], 6)],
                            [[0], [0]])
        pb = GLMMProblem(ds, CovarianceTemplate((CovBlock(0, (0,)), CovBlock(1, (0,)))), "bernoulli")
        with pytest.raises(UnsupportedModelError):
            gh_loglik(pb, np.zeros(2), np.ones(2))
