import numpy as np
import pytest

from glmmlasso.model import CovarianceTemplate, CovBlock, Dataset
from glmmlasso.problem import GLMMProblem


def make_problem(family="bernoulli", N=10, n_C=5, p=4, theta=1.0, slope=False, seed=0, beta=None,
                 structure="diagonal"):
    """Small random GLMM problem with an intercept column and optional random slope on x1."""
    rng = np.random.default_rng(seed)
    n = N * n_C
    X = np.c_[np.ones(n), rng.standard_normal((n, p - 1))]
    g = np.repeat(np.arange(N), n_C)
    if beta is None:
        beta = np.r_[0.2, 0.8, -0.6, np.zeros(max(p - 3, 0))][:p]
    cols = (0, 1) if slope else (0,)
    b = theta * rng.standard_normal((N, len(cols)))
    eta = X @ beta + np.einsum("ij,ij->i", X[:, cols], b[g])
    if family == "bernoulli":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    elif family == "poisson":
        y = rng.poisson(np.exp(np.clip(eta, -5, 3))).astype(float)
    else:
        y = eta + rng.standard_normal(n)
    ds = Dataset.create(y, X, [g], [list(cols)])
    tmpl = CovarianceTemplate((CovBlock(0, cols, structure),))
    return GLMMProblem(ds, tmpl, family)


@pytest.fixture
def logit_problem():
    return make_problem("bernoulli", N=10, n_C=5, p=4, seed=1)


@pytest.fixture
def poisson_problem():
    return make_problem("poisson", N=10, n_C=6, p=4, theta=0.7, seed=2)
