"""A fit problem bundled with the arrays the solvers reuse."""
import numpy as np

from .errors import InvalidInputError
from .family import FamilySpec, make_family
from .model import (CovarianceTemplate, Dataset, default_penalty_mask, re_structure,
                    zlambda_matrix, zlambda_rows)


class GLMMProblem:
    """Dataset + covariance template + family, immutable after construction.

    Caches the (cheap) per-theta rows of ``Z Lambda`` for the most recent
    theta and the ``c(y, phi)`` constants for the most recent phi.
    """

    def __init__(self, dataset: Dataset, template: CovarianceTemplate = None,
                 family: FamilySpec = "bernoulli", penalty_mask=None):
        if isinstance(family, str):
            family = make_family(family)
        self.dataset = dataset
        self.template = template if template is not None else CovarianceTemplate.default(dataset)
        self.family = family
        self.y = family.check_response(dataset.y)
        self.X = np.asfortranarray(dataset.X)
        self.structure = re_structure(dataset, self.template)
        if penalty_mask is None:
            penalty_mask = default_penalty_mask(dataset)
        penalty_mask = np.asarray(penalty_mask, dtype=bool)
        if penalty_mask.shape != (dataset.p,):
            raise InvalidInputError("penalty mask length differs from p")
        self.penalty_mask = penalty_mask
        self._m_key = None
        self._m = None
        self._M = None
        self._c_key = None
        self._c = None

    @property
    def n(self):
        return self.dataset.n

    @property
    def p(self):
        return self.dataset.p

    @property
    def q(self):
        return self.structure.q

    @property
    def d(self):
        return self.template.d

    def zl_rows(self, theta):
        key = tuple(np.asarray(theta, dtype=float))
        if key != self._m_key:
            self._m = zlambda_rows(theta, self.template, self.structure)
            self._M = None
            self._m_key = key
        return self._m

    def zl_matrix(self, theta):
        self.zl_rows(theta)
        if self._M is None:
            self._M = zlambda_matrix(theta, self.template, self.structure, self.n)
        return self._M

    def c_y(self, phi):
        if phi != self._c_key:
            self._c = np.ascontiguousarray(self.family.log_c(self.y, phi), dtype=float)
            self._c_key = phi
        return self._c

    def with_columns(self, keep):
        """Sub-problem on a subset of X columns (penalty mask restricted)."""
        keep = list(keep)
        return GLMMProblem(self.dataset.subset_columns(keep), _remap_template(self.template, self.dataset, keep),
                           self.family, self.penalty_mask[keep])

    def with_dataset(self, dataset):
        """Same model applied to new data with the same column schema."""
        if dataset.p != self.p:
            raise InvalidInputError(f"new data has {dataset.p} columns, model expects {self.p}")
        if dataset.re_columns != self.dataset.re_columns or len(dataset.groups) != len(self.dataset.groups):
            raise InvalidInputError("new data has a different random-effects schema")
        return GLMMProblem(dataset, self.template, self.family, self.penalty_mask)


def _remap_template(template, dataset, keep):
    from .model import INTERCEPT, CovBlock
    pos = {c: j for j, c in enumerate(keep)}
    blocks = []
    for b in template.blocks:
        vars_ = tuple(INTERCEPT if v == INTERCEPT else pos[v] for v in b.variables)
        blocks.append(CovBlock(b.factor, vars_, b.structure))
    return CovarianceTemplate(tuple(blocks), template.max_d)
