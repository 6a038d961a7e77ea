"""Exponential-family primitives with canonical links.

Every routine accepts scalars or arrays.  The integer ``code`` of a family is
what the compiled kernels dispatch on.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, logit

from .errors import InvalidInputError

ETA_CLAMP = 30.0

BERNOULLI, POISSON, GAUSSIAN = 0, 1, 2
_KINDS = {"bernoulli_logit": BERNOULLI, "poisson_log": POISSON, "gaussian_identity": GAUSSIAN}
_ALIASES = {
    "bernoulli": "bernoulli_logit",
    "binomial": "bernoulli_logit",
    "logistic": "bernoulli_logit",
    "poisson": "poisson_log",
    "gaussian": "gaussian_identity",
    "normal": "gaussian_identity",
}


@dataclass(frozen=True)
class FamilySpec:
    kind: str
    dispersion_known: bool = True
    phi_fixed: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidInputError(f"unknown family {self.kind!r}")
        if self.kind != "gaussian_identity":
            if not self.dispersion_known or self.phi_fixed != 1.0:
                raise InvalidInputError(f"{self.kind} has known dispersion phi = 1")
        if not self.phi_fixed > 0:
            raise InvalidInputError("phi_fixed must be positive")

    @property
    def code(self):
        return _KINDS[self.kind]

    @property
    def name(self):
        return self.kind.split("_")[0]

    # -- link ---------------------------------------------------------------

    def _check_mu(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.code == BERNOULLI:
            ok = (mu > 0) & (mu < 1)
        elif self.code == POISSON:
            ok = mu > 0
        else:
            ok = np.isfinite(mu)
        if not np.all(ok):
            raise InvalidInputError(f"mean value outside the {self.name} mean domain")
        return mu

    def link(self, mu):
        mu = self._check_mu(mu)
        if self.code == BERNOULLI:
            return logit(mu)
        if self.code == POISSON:
            return np.log(mu)
        return mu + 0.0

    def link_inv(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.code == BERNOULLI:
            return expit(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
        if self.code == POISSON:
            return np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
        return eta + 0.0

    def link_deriv(self, mu):
        """g'(mu)."""
        mu = self._check_mu(mu)
        if self.code == BERNOULLI:
            return 1.0 / (mu * (1.0 - mu))
        if self.code == POISSON:
            return 1.0 / mu
        return np.ones_like(mu)

    def variance(self, mu):
        mu = self._check_mu(mu)
        if self.code == BERNOULLI:
            return mu * (1.0 - mu)
        if self.code == POISSON:
            return mu + 0.0
        return np.ones_like(mu)

    # -- likelihood ---------------------------------------------------------

    def check_response(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("response contains non-finite values")
        if self.code == BERNOULLI and not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("bernoulli response must be 0/1")
        if self.code == POISSON and not np.all((y >= 0) & (y == np.round(y))):
            raise InvalidInputError("poisson response must be nonnegative integers")
        return y

    def log_c(self, y, phi=1.0):
        """c(y, phi) of the exponential-family density."""
        y = np.asarray(y, dtype=float)
        if self.code == BERNOULLI:
            return np.zeros_like(y)
        if self.code == POISSON:
            return -gammaln(y + 1.0)
        return -0.5 * y * y / phi - 0.5 * np.log(2.0 * np.pi * phi)

    def cumulant(self, xi):
        """b(xi)."""
        xi = np.asarray(xi, dtype=float)
        if self.code == BERNOULLI:
            return np.logaddexp(0.0, xi)
        if self.code == POISSON:
            return np.exp(xi)
        return 0.5 * xi * xi

    def neg2_loglik_terms(self, y, mu, phi=1.0):
        """-2 [ (y xi - b(xi)) / phi + c(y, phi) ] per observation."""
        if not np.all(np.asarray(phi) > 0):
            raise InvalidInputError("phi must be positive")
        y = self.check_response(y)
        xi = self.link(mu)
        return -2.0 * ((y * xi - self.cumulant(xi)) / phi + self.log_c(y, phi))

    def neg2_loglik_eta(self, y, eta, phi=1.0):
        """Same as :meth:`neg2_loglik_terms` but parameterised by the clamped linear predictor."""
        eta = np.asarray(eta, dtype=float)
        if self.code != GAUSSIAN:
            eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        return -2.0 * ((y * eta - self.cumulant(eta)) / phi + self.log_c(y, phi))

    def working_weights(self, mu, phi=1.0):
        """Diagonal of W = diag(1 / (phi v(mu) g'(mu)^2))."""
        return 1.0 / (phi * self.variance(mu) * self.link_deriv(mu) ** 2)


def make_family(name, phi=None):
    """Build a :class:`FamilySpec` from a short name (``bernoulli``, ``poisson``, ``gaussian``).

    For the gaussian family ``phi=None`` means the dispersion is estimated;
    a number fixes it.
    """
    kind = _ALIASES.get(str(name).strip().lower(), str(name).strip().lower())
    if kind not in _KINDS:
        raise InvalidInputError(f"unknown family {name!r}; expected one of {sorted(_ALIASES)}")
    if kind == "gaussian_identity":
        if phi is None:
            return FamilySpec(kind, dispersion_known=False, phi_fixed=1.0)
        return FamilySpec(kind, dispersion_known=True, phi_fixed=float(phi))
    return FamilySpec(kind)
