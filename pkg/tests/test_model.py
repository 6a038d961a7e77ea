import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glmmlasso.errors import InvalidInputError
from glmmlasso.model import (INTERCEPT, CovarianceTemplate, CovBlock, Dataset, ParamState,
                             beta_to_original_scale, build_lambda, build_z, default_penalty_mask,
                             parse_structure_name, reindex_labels, summarize_theta, zlambda_matrix,
                             zlambda_times)
from glmmlasso.objective import q_la
from glmmlasso.problem import GLMMProblem

from conftest import make_problem


def _dataset(N=3, n_C=2, p=3, re=((0,),), groups=None, seed=0):
    rng = np.random.default_rng(seed)
    n = N * n_C
    X = np.c_[np.ones(n), rng.standard_normal((n, p - 1))]
    g = np.repeat(np.arange(N), n_C) if groups is None else groups
    return Dataset.create(rng.integers(0, 2, n), X, [g] if np.ndim(g) == 1 else g, [list(c) for c in re])


class TestDataset:
    def test_reindex_first_appearance(self):
        codes, levels = reindex_labels(np.array(["b", "a", "b", "c"]))
        np.testing.assert_array_equal(codes, [0, 1, 0, 2])
        np.testing.assert_array_equal(levels, ["b", "a", "c"])

    def test_rejects_bad_input(self):
        X = np.c_[np.ones(4), np.arange(4.0)]
        with pytest.raises(InvalidInputError):
            Dataset.create(np.zeros(3), X, [np.zeros(4)])
        with pytest.raises(InvalidInputError):
            Dataset.create(np.zeros(4), np.c_[X, np.zeros(4)], [np.zeros(4)])
        with pytest.raises(InvalidInputError):
            Dataset.create(np.r_[0, 1, np.nan, 0], X, [np.zeros(4)])
        with pytest.raises(InvalidInputError):
            Dataset.create(np.zeros(4), X, [np.zeros(3)])
        with pytest.raises(InvalidInputError):
            Dataset.create(np.zeros(4), X, [np.zeros(4)], [[5]])

    def test_default_random_intercept(self):
        ds = _dataset()
        assert ds.re_columns == ((0,),)
        ds2 = Dataset.create(np.zeros(4), np.arange(1.0, 5.0), [np.array([0, 0, 1, 1])])
        assert ds2.re_columns == ((INTERCEPT,),)

    def test_group_sizes_sum_to_n(self):
        ds = _dataset(N=4, n_C=3)
        assert ds.group_sizes().sum() == ds.n == 12

    def test_subset_keeps_random_columns(self):
        ds = _dataset(p=4, re=((0, 2),))
        sub = ds.subset_columns([0, 2, 3])
        assert sub.re_columns == ((0, 1),)
        with pytest.raises(InvalidInputError):
            ds.subset_columns([0, 1])

    def test_standardize_and_back(self):
        ds = _dataset(N=5, n_C=4, p=4)
        ds.X[:, 1] = 3 * ds.X[:, 1] + 2
        std, c, s = ds.standardize()
        np.testing.assert_allclose(std.X[:, 1:].mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(std.X[:, 1:].std(0), 1, atol=1e-12)
        np.testing.assert_array_equal(std.X[:, 0], 1.0)
        b = np.array([0.3, 1.0, -2.0, 0.5])
        raw = beta_to_original_scale(b, c, s, 0)
        np.testing.assert_allclose(ds.X @ raw, std.X @ b, atol=1e-12)


class TestZ:
    def test_random_intercept_indicator(self):
        ds = _dataset(N=3, n_C=2)
        Z, st_ = build_z(ds, CovarianceTemplate.default(ds))
        assert Z.shape == (6, 3) and st_.q == 3
        D = Z.toarray()
        np.testing.assert_array_equal(D.sum(axis=1), 1.0)
        assert set(np.unique(D)) == {0.0, 1.0}

    def test_h1_shape(self):
        ds = _dataset(N=40, n_C=10, p=5, re=((0, 1),))
        _, st_ = build_z(ds, CovarianceTemplate.default(ds))
        assert st_.q == 80

    def test_two_factor_shape(self):
        n = 236
        subj = np.repeat(np.arange(59), 4)
        obs = np.arange(n)
        X = np.c_[np.ones(n), np.random.default_rng(0).standard_normal(n)]
        ds = Dataset.create(np.zeros(n), X, [subj, obs], [[0], [0]])
        _, st_ = build_z(ds, CovarianceTemplate.default(ds))
        assert st_.q == 295 and not st_.single

    def test_empty_level_rejected(self):
        ds = _dataset(N=3, n_C=2)
        tmpl = CovarianceTemplate((CovBlock(1, (0,)),))
        with pytest.raises(InvalidInputError):
            build_z(ds, tmpl)


class TestLambda:
    def test_scalar_identity(self):
        ds = _dataset(N=3, n_C=2)
        tmpl = CovarianceTemplate((CovBlock(0, (0,), "scalar_identity"),))
        _, st_ = build_z(ds, tmpl)
        L = build_lambda(np.array([2.0]), tmpl, st_).toarray()
        np.testing.assert_array_equal(L, 2 * np.eye(3))
        np.testing.assert_array_equal(L @ L.T, 4 * np.eye(3))

    def test_diagonal_unit(self):
        ds = _dataset(N=4, n_C=3, re=((0, 1),))
        tmpl = CovarianceTemplate.default(ds)
        _, st_ = build_z(ds, tmpl)
        L = build_lambda(np.array([1.0, 1.0]), tmpl, st_).toarray()
        np.testing.assert_array_equal(L @ L.T, np.eye(8))

    def test_unstructured_correlation(self):
        tmpl = CovarianceTemplate((CovBlock(0, (0, 1), "unstructured_lower"),))
        S = np.array([[1.0, 0.5], [0.5, 1.0]])
        theta = tmpl.theta_from_covariance({0: S})
        L = tmpl.factor_cholesky(theta, 0)
        np.testing.assert_allclose(L[1], [0.5, np.sqrt(0.75)], atol=1e-15)
        np.testing.assert_allclose(L @ L.T, S, atol=1e-12)
        assert summarize_theta(theta, tmpl)["cor[0:0,1]"] == pytest.approx(0.5)

    def test_param_counts(self):
        assert CovBlock(0, (0, 1, 2), "scalar_identity").n_params == 1
        assert CovBlock(0, (0, 1, 2), "diagonal").n_params == 3
        assert CovBlock(0, (0, 1, 2), "unstructured_lower").n_params == 6

    def test_max_dimension(self):
        with pytest.raises(InvalidInputError):
            CovarianceTemplate((CovBlock(0, tuple(range(5)), "unstructured_lower"),))

    @given(st.lists(st.floats(0, 3), min_size=3, max_size=3), st.floats(-2, 2))
    @settings(max_examples=50, deadline=None)
    def test_psd_and_exact(self, diag, off):
        tmpl = CovarianceTemplate((CovBlock(0, (0, 1), "unstructured_lower"), CovBlock(0, (2,))))
        theta = np.array([diag[0], off, diag[1], diag[2]])
        L = tmpl.factor_cholesky(theta, 0)
        S = tmpl.factor_covariance(theta, 0)
        assert np.all(np.linalg.eigvalsh(S) >= -1e-12)
        assert np.max(np.abs(L @ L.T - S)) <= 1e-12
        if off == 0:
            np.testing.assert_array_equal(S, np.diag(np.diag(L) ** 2))

    def test_zlambda_fast_path_matches_dense(self):
        rng = np.random.default_rng(3)
        n = 30
        X = np.c_[np.ones(n), rng.standard_normal((n, 2))]
        ds = Dataset.create(np.zeros(n), X, [rng.integers(0, 4, n), rng.integers(0, 3, n)], [[0, 1], [0]])
        tmpl = CovarianceTemplate((CovBlock(0, (0, 1), "unstructured_lower"), CovBlock(1, (0,))))
        theta = np.array([1.2, -0.4, 0.7, 0.5])
        Z, st_ = build_z(ds, tmpl)
        u = rng.standard_normal(st_.q)
        dense = Z.toarray() @ build_lambda(theta, tmpl, st_).toarray() @ u
        np.testing.assert_allclose(zlambda_times(u, theta, tmpl, st_), dense, atol=1e-12)
        np.testing.assert_allclose(zlambda_matrix(theta, tmpl, st_, n) @ u, dense, atol=1e-12)


class TestPenaltyMask:
    def test_h1_mask(self):
        ds = _dataset(N=4, n_C=3, p=6, re=((0, 1),))
        np.testing.assert_array_equal(default_penalty_mask(ds), [False, False, True, True, True, True])

    def test_random_intercept_mask(self):
        ds = _dataset(p=4)
        np.testing.assert_array_equal(default_penalty_mask(ds), [False, True, True, True])

    def test_intercept_only(self):
        ds = Dataset.create(np.zeros(4), np.ones((4, 1)), [np.array([0, 0, 1, 1])])
        np.testing.assert_array_equal(default_penalty_mask(ds), [False])


class TestParams:
    def test_param_state(self):
        ps = ParamState([0.0, 1.0], [1.0])
        assert ps.phi == 1.0
        np.testing.assert_array_equal(ps.active_set, [1])
        with pytest.raises(InvalidInputError):
            ParamState([0.0], [1.0], phi=0.0)

    def test_structure_names(self):
        assert parse_structure_name("unstructured") == "unstructured_lower"
        with pytest.raises(InvalidInputError):
            parse_structure_name("toeplitz")


class TestRelabeling:
    def test_q_la_invariant_under_label_permutation(self):
        pb = make_problem("bernoulli", N=8, n_C=5, p=4, seed=4)
        ds = pb.dataset
        perm = np.random.default_rng(0).permutation(8)
        ds2 = Dataset.create(ds.y, ds.X, [perm[ds.groups[0]] + 100], ds.re_columns)
        pb2 = GLMMProblem(ds2, pb.template, "bernoulli")
        beta, theta = np.array([0.1, 0.5, -0.3, 0.2]), np.array([0.9])
        a = q_la(pb, beta, theta, 1.0, 0.5)[0].q_la
        b = q_la(pb2, beta, theta, 1.0, 0.5)[0].q_la
        assert a == pytest.approx(b, rel=1e-12)
