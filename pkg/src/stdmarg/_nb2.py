"""NB2 log-likelihood pieces in the dispersion ``alpha`` (Var = mu + alpha mu^2).

Integer counts let ``lgamma(y + 1/alpha) - lgamma(1/alpha)`` be written as a
finite sum over ``j < y`` of ``log(1 + alpha j)`` (plus ``y log(1/alpha)``),
which stays accurate as ``alpha -> 0`` where the digamma form cancels
catastrophically.  The remaining ``alpha``-only terms switch to a power series
in ``u = alpha mu`` below ``_SERIES_CUTOFF``.
"""

import numpy as np
from scipy.special import gammaln

_SERIES_CUTOFF = 1e-2
_K = np.arange(14)
# f(u)/mu^2 = ln(1+u)/u^2 - 1/(u(1+u))
_F_COEF = (-1.0) ** _K * (_K + 1) / (_K + 2)
# g(u)/mu^3 = -2 ln(1+u)/u^3 + 2/(u^2(1+u)) + 1/(u(1+u)^2)
_G_COEF = (-1.0) ** _K * (-2.0 / (_K + 3) - _K)


def _j_sums(y: np.ndarray, alpha: float):
    """Return sum_{j<y} log(1+aj), j/(1+aj) and (j/(1+aj))^2 for each y."""
    ymax = int(y.max()) if y.size else 0
    j = np.arange(ymax, dtype=float)
    aj = alpha * j
    r = j / (1.0 + aj)
    c1 = np.concatenate(([0.0], np.cumsum(np.log1p(aj))))
    c2 = np.concatenate(([0.0], np.cumsum(r)))
    c3 = np.concatenate(([0.0], np.cumsum(r * r)))
    return c1[y], c2[y], c3[y]


def _series(coef, u):
    return np.polynomial.polynomial.polyval(u, coef)


def loglik(y: np.ndarray, mu: np.ndarray, alpha: float) -> np.ndarray:
    """Per-row NB2 log-likelihood; ``y`` integer array."""
    c1, _, _ = _j_sums(y, alpha)
    u = alpha * mu
    # (y + 1/alpha) log(1+u), with 1/alpha * log(1+u) = mu * log1p(u)/u
    small = u < 1e-300
    ratio = np.where(small, 1.0, np.log1p(u) / np.where(small, 1.0, u))
    tail = y * np.log1p(u) + mu * ratio
    return c1 - gammaln(y + 1.0) + y * np.log(mu) - tail


def alpha_derivs(y: np.ndarray, mu: np.ndarray, alpha: float):
    """Per-row first and second derivatives of the NB2 log-likelihood in alpha."""
    _, c2, c3 = _j_sums(y, alpha)
    u = alpha * mu
    f = np.empty_like(mu)
    g = np.empty_like(mu)
    lo = u < _SERIES_CUTOFF
    if lo.any():
        f[lo] = mu[lo] ** 2 * _series(_F_COEF, u[lo])
        g[lo] = mu[lo] ** 3 * _series(_G_COEF, u[lo])
    hi = ~lo
    if hi.any():
        uh, mh = u[hi], mu[hi]
        l1p = np.log1p(uh)
        f[hi] = l1p / alpha**2 - mh / (alpha * (1.0 + uh))
        g[hi] = (-2.0 * l1p / alpha**3 + 2.0 * mh / (alpha**2 * (1.0 + uh))
                 + mh**2 / (alpha * (1.0 + uh) ** 2))
    s = c2 + f - y * mu / (1.0 + u)
    h = -c3 + g + y * mu**2 / (1.0 + u) ** 2
    return s, h


def moment_alpha(y: np.ndarray, mu: np.ndarray) -> float:
    return float(np.sum((y - mu) ** 2 - mu) / np.sum(mu**2))
