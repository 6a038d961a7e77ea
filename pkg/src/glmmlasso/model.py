"""Problem data: designs, grouping factors, covariance templates, parameters.

The random-effects design is never materialised per observation beyond what
the solvers need.  For grouping factor ``f`` with ``k_f`` random-effect
variables, observation ``i`` contributes the row ``z_i^T Lambda_f`` to the
columns ``offset_f + level_i * k_f + (0..k_f-1)`` of ``Z Lambda``.  Columns of
``Z`` are ordered factor by factor, level-major within a factor.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError

INTERCEPT = -1  # pseudo column index for a constant random-effect variable
STRUCTURES = ("scalar_identity", "diagonal", "unstructured_lower")
MAX_THETA_DIM = 10


def reindex_labels(labels):
    """Map arbitrary labels to 0..G-1 by order of first appearance."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise InvalidInputError("group labels must be one-dimensional")
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    codes = rank[inverse.ravel()]
    return codes, labels[np.sort(first)]


@dataclass(frozen=True)
class Dataset:
    """Response, fixed-effects design and grouping factors.

    ``groups`` holds integer codes 0..G-1 per factor (see :meth:`create`),
    ``re_columns[f]`` the X column indices carrying a random effect under
    factor ``f`` (``INTERCEPT`` for a constant that is not a column of X).
    """

    y: np.ndarray
    X: np.ndarray
    groups: tuple
    re_columns: tuple
    column_names: tuple = ()
    group_names: tuple = ()
    group_levels: tuple = ()

    @classmethod
    def create(cls, y, X, groups, re_columns=None, column_names=None, group_names=None):
        y = np.asarray(y, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n, p = X.shape
        if y.shape[0] != n:
            raise InvalidInputError(f"y has length {y.shape[0]} but X has {n} rows")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise InvalidInputError("non-finite values in y or X")
        zero_cols = np.flatnonzero(~np.any(X != 0, axis=0))
        if zero_cols.size:
            raise InvalidInputError(f"X has constant zero columns {zero_cols.tolist()}")
        if isinstance(groups, np.ndarray) and groups.ndim == 1:
            groups = [groups]
        codes, levels = [], []
        for g in groups:
            g = np.asarray(g)
            if g.shape[0] != n:
                raise InvalidInputError("grouping vector length differs from n")
            c, lv = reindex_labels(g)
            codes.append(c)
            levels.append(lv)
        if re_columns is None:
            icpt = intercept_column(X)
            re_columns = [[icpt if icpt is not None else INTERCEPT] for _ in codes]
        if len(re_columns) != len(codes):
            raise InvalidInputError("re_columns needs one entry per grouping factor")
        re_cols = []
        for cols in re_columns:
            cols = tuple(int(c) for c in cols)
            for c in cols:
                if c != INTERCEPT and not 0 <= c < p:
                    raise InvalidInputError(f"random-effect column {c} out of range")
            re_cols.append(cols)
        column_names = tuple(column_names) if column_names is not None else tuple(
            f"x{j}" for j in range(p))
        if len(column_names) != p:
            raise InvalidInputError("column_names length differs from p")
        group_names = tuple(group_names) if group_names is not None else tuple(
            f"g{f}" for f in range(len(codes)))
        return cls(y, X, tuple(codes), tuple(re_cols), column_names, group_names, tuple(levels))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def n_levels(self):
        return tuple(int(g.max()) + 1 if g.size else 0 for g in self.groups)

    def group_sizes(self, factor=0):
        return np.bincount(self.groups[factor], minlength=self.n_levels[factor])

    def subset_columns(self, keep):
        """Keep the listed X columns (random-effect columns must be kept)."""
        keep = [int(k) for k in keep]
        pos = {c: j for j, c in enumerate(keep)}
        re_cols = []
        for cols in self.re_columns:
            new = []
            for c in cols:
                if c == INTERCEPT:
                    new.append(INTERCEPT)
                elif c in pos:
                    new.append(pos[c])
                else:
                    raise InvalidInputError(f"column {c} carries a random effect and cannot be dropped")
            re_cols.append(tuple(new))
        return replace(self, X=self.X[:, keep], re_columns=tuple(re_cols),
                       column_names=tuple(self.column_names[k] for k in keep))

    def standardize(self):
        """Centre and scale non-intercept columns to mean 0 and sd 1.

        Returns ``(dataset, center, scale)``; the intercept column keeps
        center 0 and scale 1.
        """
        X = self.X
        icpt = intercept_column(X)
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        const = scale == 0
        center[const] = 0.0
        scale[const] = 1.0
        if icpt is not None:
            center[icpt], scale[icpt] = 0.0, 1.0
        Xs = (X - center) / scale
        if icpt is not None:
            Xs[:, icpt] = 1.0
        return replace(self, X=Xs), center, scale


def intercept_column(X):
    """Index of the first all-ones column of X, or None."""
    hit = np.flatnonzero(np.all(X == 1.0, axis=0))
    return int(hit[0]) if hit.size else None


def beta_to_original_scale(beta, center, scale, icpt):
    """Map coefficients fitted on standardized columns back to raw columns."""
    beta = np.asarray(beta, dtype=float)
    raw = beta / scale
    if icpt is not None:
        raw[icpt] = beta[icpt] - np.sum(np.delete(raw * center, icpt))
    return raw


# ---------------------------------------------------------------------------
# covariance template
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovBlock:
    factor: int
    variables: tuple
    structure: str = "diagonal"

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise InvalidInputError(f"unknown covariance structure {self.structure!r}")
        if not self.variables:
            raise InvalidInputError("covariance block without variables")

    @property
    def k(self):
        return len(self.variables)

    @property
    def n_params(self):
        if self.structure == "scalar_identity":
            return 1
        if self.structure == "diagonal":
            return self.k
        return self.k * (self.k + 1) // 2

    def entries(self):
        """(row, col) of the Cholesky entry each parameter fills, in parameter order.

        ``scalar_identity`` returns ``None`` for its single parameter (it fills
        the whole diagonal).  Unstructured blocks fill the lower triangle
        column by column.
        """
        if self.structure == "scalar_identity":
            return [None]
        if self.structure == "diagonal":
            return [(j, j) for j in range(self.k)]
        return [(i, j) for j in range(self.k) for i in range(j, self.k)]


@dataclass(frozen=True)
class CovarianceTemplate:
    blocks: tuple
    max_d: int = MAX_THETA_DIM

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.d > self.max_d:
            raise InvalidInputError(f"template has d={self.d} > {self.max_d} covariance parameters")
        seen = {}
        for b in self.blocks:
            for v in b.variables:
                if (b.factor, v) in seen:
                    raise InvalidInputError(f"variable {v} appears twice under factor {b.factor}")
                seen[(b.factor, v)] = True

    @classmethod
    def default(cls, dataset, structure="diagonal"):
        return cls(tuple(CovBlock(f, tuple(cols), structure)
                         for f, cols in enumerate(dataset.re_columns)))

    @property
    def d(self):
        return sum(b.n_params for b in self.blocks)

    @property
    def factors(self):
        out = []
        for b in self.blocks:
            if b.factor not in out:
                out.append(b.factor)
        return out

    def factor_variables(self, factor):
        return tuple(v for b in self.blocks if b.factor == factor for v in b.variables)

    def param_info(self):
        """Per-parameter (block index, entry, is_diagonal)."""
        info = []
        for bi, b in enumerate(self.blocks):
            for e in b.entries():
                info.append((bi, e, e is None or e[0] == e[1]))
        return info

    def is_diagonal_param(self):
        return np.array([diag for _, _, diag in self.param_info()], dtype=bool)

    def default_theta(self):
        return np.where(self.is_diagonal_param(), 1.0, 0.0)

    def block_cholesky(self, theta, bi):
        self._check_theta(theta)
        start = sum(b.n_params for b in self.blocks[:bi])
        b = self.blocks[bi]
        vals = np.asarray(theta, dtype=float)[start:start + b.n_params]
        if b.structure == "scalar_identity":
            return vals[0] * np.eye(b.k)
        L = np.zeros((b.k, b.k))
        for v, (i, j) in zip(vals, b.entries()):
            L[i, j] = v
        return L

    def factor_cholesky(self, theta, factor):
        """Local Cholesky factor for one grouping factor (block diagonal over its blocks)."""
        mats = [self.block_cholesky(theta, bi) for bi, b in enumerate(self.blocks) if b.factor == factor]
        k = sum(m.shape[0] for m in mats)
        L = np.zeros((k, k))
        o = 0
        for m in mats:
            L[o:o + m.shape[0], o:o + m.shape[0]] = m
            o += m.shape[0]
        return L

    def factor_covariance(self, theta, factor):
        L = self.factor_cholesky(theta, factor)
        return L @ L.T

    def theta_from_covariance(self, sigmas):
        """Inverse of :meth:`factor_covariance`: ``sigmas`` maps factor -> k x k matrix."""
        theta = []
        for b in self.blocks:
            idx = [self.factor_variables(b.factor).index(v) for v in b.variables]
            S = np.asarray(sigmas[b.factor], dtype=float)[np.ix_(idx, idx)]
            if b.structure == "scalar_identity":
                theta.append(np.sqrt(S[0, 0]))
            elif b.structure == "diagonal":
                theta.extend(np.sqrt(np.diag(S)))
            else:
                L = np.linalg.cholesky(S)
                theta.extend(L[i, j] for i, j in b.entries())
        return np.array(theta, dtype=float)

    def _check_theta(self, theta):
        if np.asarray(theta).shape != (self.d,):
            raise InvalidInputError(f"theta must have length {self.d}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ParamState:
    beta: np.ndarray
    theta: np.ndarray
    phi: float = 1.0
    penalty_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.beta = np.array(self.beta, dtype=float)
        self.theta = np.array(self.theta, dtype=float)
        self.phi = float(self.phi)
        if self.penalty_mask is None:
            self.penalty_mask = np.ones(self.beta.shape[0], dtype=bool)
        self.penalty_mask = np.array(self.penalty_mask, dtype=bool)
        if not self.phi > 0:
            raise InvalidInputError("phi must be positive")

    def copy(self):
        return ParamState(self.beta.copy(), self.theta.copy(), self.phi, self.penalty_mask.copy())

    @property
    def active_set(self):
        return np.flatnonzero(self.beta != 0)


def default_penalty_mask(dataset):
    """Intercept and every random-effect column are left unpenalized."""
    mask = np.ones(dataset.p, dtype=bool)
    icpt = intercept_column(dataset.X)
    if icpt is not None:
        mask[icpt] = False
    for cols in dataset.re_columns:
        for c in cols:
            if c != INTERCEPT:
                mask[c] = False
    return mask


# ---------------------------------------------------------------------------
# random-effects structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FactorLayout:
    factor: int
    levels: np.ndarray      # (n,) level code per observation
    zvals: np.ndarray       # (n, k) random-effect variable values
    n_levels: int
    offset: int             # first column in Z
    order: np.ndarray       # observations sorted by level
    ptr: np.ndarray         # level boundaries in ``order``

    @property
    def k(self):
        return self.zvals.shape[1]

    @property
    def q(self):
        return self.n_levels * self.k


@dataclass(frozen=True)
class ReStructure:
    """Block descriptor of Z; ``single`` enables the block-diagonal fast path."""

    layouts: tuple
    q: int

    @property
    def single(self):
        return len(self.layouts) == 1


def re_structure(dataset, template):
    layouts = []
    offset = 0
    for f in template.factors:
        if f >= len(dataset.groups):
            raise InvalidInputError(f"template refers to unknown grouping factor {f}")
        levels = dataset.groups[f]
        G = dataset.n_levels[f]
        vars_ = template.factor_variables(f)
        zvals = np.empty((dataset.n, len(vars_)))
        for j, v in enumerate(vars_):
            zvals[:, j] = 1.0 if v == INTERCEPT else dataset.X[:, v]
        order = np.argsort(levels, kind="stable").astype(np.int64)
        ptr = np.zeros(G + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(np.bincount(levels, minlength=G))
        if np.any(np.diff(ptr) == 0):
            raise InvalidInputError(f"grouping factor {f} has empty levels")
        layouts.append(FactorLayout(f, levels.astype(np.int64), np.ascontiguousarray(zvals),
                                    G, offset, order, ptr))
        offset += G * len(vars_)
    return ReStructure(tuple(layouts), offset)


def build_z(dataset, template):
    """Sparse n x q random-effects design and its block descriptor."""
    st = re_structure(dataset, template)
    rows, cols, vals = [], [], []
    n = dataset.n
    for lay in st.layouts:
        for a in range(lay.k):
            rows.append(np.arange(n))
            cols.append(lay.offset + lay.levels * lay.k + a)
            vals.append(lay.zvals[:, a])
    Z = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, st.q))
    return Z, st


def build_lambda(theta, template, structure):
    """Sparse block-diagonal lower-triangular Lambda_theta (q x q)."""
    mats = []
    for lay in structure.layouts:
        L = template.factor_cholesky(theta, lay.factor)
        mats.append(sp.kron(sp.identity(lay.n_levels, format="csr"), sp.csr_matrix(L), format="csr"))
    return sp.block_diag(mats, format="csr")


def zlambda_rows(theta, template, structure):
    """Per factor, the (n, k) array of rows ``z_i^T Lambda_f``."""
    return [np.ascontiguousarray(lay.zvals @ template.factor_cholesky(theta, lay.factor))
            for lay in structure.layouts]


def zlambda_matrix(theta, template, structure, n):
    """Sparse Z Lambda assembled from :func:`zlambda_rows`."""
    rows, cols, vals = [], [], []
    for lay, m in zip(structure.layouts, zlambda_rows(theta, template, structure)):
        for a in range(lay.k):
            rows.append(np.arange(n))
            cols.append(lay.offset + lay.levels * lay.k + a)
            vals.append(m[:, a])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, structure.q))


def zlambda_times(u, theta, template, structure):
    """Z Lambda u using the block layout (no sparse matrix)."""
    out = 0.0
    for lay, m in zip(structure.layouts, zlambda_rows(theta, template, structure)):
        U = np.asarray(u)[lay.offset:lay.offset + lay.q].reshape(lay.n_levels, lay.k)
        out = out + np.einsum("ij,ij->i", m, U[lay.levels])
    return out


def parse_structure_name(name: str) -> str:
    key = name.strip().lower()
    aliases = {"scalar": "scalar_identity", "identity": "scalar_identity",
               "diag": "diagonal", "independent": "diagonal",
               "unstructured": "unstructured_lower", "full": "unstructured_lower"}
    key = aliases.get(key, key)
    if key not in STRUCTURES:
        raise InvalidInputError(f"unknown covariance structure {name!r}")
    return key


def summarize_theta(theta, template: CovarianceTemplate) -> dict[str, float]:
    """Variances (and correlations for unstructured blocks) implied by theta."""
    out = {}
    for f in template.factors:
        S = template.factor_covariance(theta, f)
        vars_: Sequence[int] = template.factor_variables(f)
        for j, v in enumerate(vars_):
            out[f"var[{f}:{v}]"] = float(S[j, j])
        for b in template.blocks:
            if b.factor == f and b.structure == "unstructured_lower":
                idx = [vars_.index(v) for v in b.variables]
                for a in range(len(idx)):
                    for c in range(a):
                        i, j = idx[a], idx[c]
                        den = np.sqrt(S[i, i] * S[j, j])
                        out[f"cor[{f}:{vars_[j]},{vars_[i]}]"] = float(S[i, j] / den) if den > 0 else 0.0
    return out
