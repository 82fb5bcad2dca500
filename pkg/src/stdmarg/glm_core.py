"""Outcome regression fitting by estimating equations.

Gaussian/identity, binomial/logit and Poisson/log are fitted by IRLS on their
canonical score ``sum (y - mu) x``; NB2/log alternates a Fisher-scoring step
for the coefficients with a Newton step for the dispersion on the log scale.
Every fit keeps what downstream variance estimators need: per-row estimating
function contributions, the bread matrix and both covariance estimates.

Design matrix columns are always ordered
``[intercept, covariates..., arm indicators 1..k-1, covariate x arm interactions...]``
with arm 0 as reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, gammaln

from . import _nb2
from .dataset import TrialDataset
from .errors import (
    DimensionMismatch,
    InvalidFamilyData,
    InvalidModelSpec,
    NonConvergence,
    RankDeficientDesign,
    SeparationDetected,
    SingularBread,
)

FAMILIES = ("gaussian", "binomial", "poisson", "negbin2")
_CANONICAL = {"gaussian": "identity", "binomial": "logit", "poisson": "log", "negbin2": "log"}

ALPHA_MIN = 1e-8
ALPHA_MAX = 1e8
MAX_ITER = 100
SCORE_TOL = 1e-8
LOGLIK_RTOL = 1e-10
RCOND_MIN = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    """Outcome model: family, link, interaction terms and offset rule.

    ``interactions`` lists covariate column indices that get a product term
    with every non-reference arm indicator.
    """

    family: str
    link: Optional[str] = None
    interactions: Tuple[int, ...] = ()
    offset_rule: str = "none"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidModelSpec(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        link = _CANONICAL[self.family] if self.link is None else self.link
        if link != _CANONICAL[self.family]:
            raise InvalidModelSpec(
                f"family {self.family!r} requires link {_CANONICAL[self.family]!r}, got {link!r}")
        if self.offset_rule not in ("none", "log_followup"):
            raise InvalidModelSpec(f"unknown offset_rule {self.offset_rule!r}")
        if self.offset_rule == "log_followup" and link != "log":
            raise InvalidModelSpec("offset_rule 'log_followup' requires the log link")
        object.__setattr__(self, "link", link)
        object.__setattr__(self, "interactions", tuple(int(j) for j in self.interactions))

    @property
    def canonical(self) -> bool:
        return self.family in ("gaussian", "binomial", "poisson")


def design_matrix(x: np.ndarray, z: np.ndarray, n_arms: int, spec: ModelSpec) -> np.ndarray:
    """Build the design matrix; ``z`` may be a scalar to force every row to one arm."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, p = x.shape
    z = np.broadcast_to(np.asarray(z), (n,))
    for j in spec.interactions:
        if not 0 <= j < p:
            raise DimensionMismatch(f"interaction covariate index {j} out of range (p={p})")
    arms = (z[:, None] == np.arange(1, n_arms)[None, :]).astype(float)
    cols = [np.ones((n, 1)), x, arms]
    for j in spec.interactions:
        cols.append(x[:, [j]] * arms)
    return np.hstack(cols)


def column_names(covariate_names: Sequence[str], n_arms: int, spec: ModelSpec,
                 arm_names: Optional[Sequence[str]] = None) -> list:
    arm_names = [str(a) for a in (arm_names or range(n_arms))]
    names = ["(intercept)", *covariate_names]
    names += [f"arm[{arm_names[a]}]" for a in range(1, n_arms)]
    for j in spec.interactions:
        names += [f"{covariate_names[j]}:arm[{arm_names[a]}]" for a in range(1, n_arms)]
    return names


def _inverse_link(link: str, eta: np.ndarray) -> np.ndarray:
    if link == "identity":
        return eta
    if link == "logit":
        return expit(eta)
    return np.exp(eta)


def _mean_derivative(link: str, mu: np.ndarray) -> np.ndarray:
    """d mu / d eta expressed through mu."""
    if link == "identity":
        return np.ones_like(mu)
    if link == "logit":
        return mu * (1.0 - mu)
    return mu


@dataclass(frozen=True, eq=False)
class FitResult:
    """Immutable result of :func:`fit`.

    ``scores`` holds per-row estimating function contributions (n x theta_dim)
    evaluated at the estimate and ``bread`` is their averaged derivative.  For
    ``negbin2`` the last coordinate of theta is the dispersion ``alpha``.
    """

    spec: ModelSpec
    beta_hat: np.ndarray
    eta_hat: Optional[float]
    scores: np.ndarray
    bread: np.ndarray
    vcov_model: np.ndarray
    vcov_sandwich: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    n: int
    p: int
    n_arms: int
    effectively_poisson: bool = False

    @property
    def q(self) -> int:
        return self.beta_hat.shape[0]

    @property
    def theta_dim(self) -> int:
        return self.scores.shape[1]

    @property
    def theta_hat(self) -> np.ndarray:
        if self.eta_hat is None:
            return self.beta_hat
        return np.append(self.beta_hat, self.eta_hat)

    def vcov_beta(self, source: str = "sandwich") -> np.ndarray:
        if source not in ("sandwich", "model"):
            raise ValueError(f"unknown vcov source {source!r}")
        v = self.vcov_sandwich if source == "sandwich" else self.vcov_model
        return v[: self.q, : self.q]


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_family_data(y: np.ndarray, family: str) -> None:
    if not np.all(np.isfinite(y)):
        raise InvalidFamilyData("outcome contains non-finite values")
    if family == "binomial" and np.any((y < 0) | (y > 1)):
        raise InvalidFamilyData("binomial outcome must lie in [0, 1]")
    if family in ("poisson", "negbin2") and np.any(y < 0):
        raise InvalidFamilyData(f"{family} outcome must be non-negative")
    if family == "negbin2" and np.any(y != np.round(y)):
        raise InvalidFamilyData("negbin2 outcome must be integer counts")


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    q = X.shape[1]
    if X.shape[0] < q or np.linalg.matrix_rank(X) < q:
        zero = [names[j] for j in range(q) if not np.any(X[:, j])]
        detail = f"; all-zero columns: {zero}" if zero else ""
        raise RankDeficientDesign(f"design matrix ({X.shape[0]} x {q}) is not full column rank{detail}")


def _canonical_loglik(family: str, y, eta, mu) -> float:
    if family == "gaussian":
        return -0.5 * float(np.sum((y - mu) ** 2))
    if family == "binomial":
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return float(np.sum(y * eta - mu - gammaln(y + 1.0)))


def _initial_beta(X, y, t, spec: ModelSpec) -> np.ndarray:
    beta = np.zeros(X.shape[1])
    if spec.link == "identity":
        beta[0] = np.mean(y)
    elif spec.link == "logit":
        m = np.clip(np.mean(y), 1e-6, 1 - 1e-6)
        beta[0] = np.log(m / (1 - m))
    else:
        rate = np.sum(y) / np.sum(t) if spec.offset_rule == "log_followup" else np.mean(y)
        beta[0] = np.log(max(rate, 1e-6))
    return beta


def _converged_ll(ll_new: float, ll_old: float) -> bool:
    return abs(ll_new - ll_old) <= LOGLIK_RTOL * (abs(ll_new) + 1.0)


def _irls(X, y, offset, spec: ModelSpec, beta, max_iter):
    """IRLS with step halving for the canonical families."""
    n = X.shape[0]
    link, family = spec.link, spec.family
    eta = X @ beta + offset
    mu = _inverse_link(link, eta)
    ll = _canonical_loglik(family, y, eta, mu)
    for it in range(1, max_iter + 1):
        w = _mean_derivative(link, mu)
        info = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(info, X.T @ (y - mu))
        except np.linalg.LinAlgError:
            return beta, it, False, ll
        for _ in range(40):
            b_new = beta + step
            eta_new = X @ b_new + offset
            mu_new = _inverse_link(link, eta_new)
            ll_new = _canonical_loglik(family, y, eta_new, mu_new)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (abs(ll) + 1.0):
                break
            step = step / 2.0
        ll_old, ll = ll, ll_new
        beta, eta, mu = b_new, eta_new, mu_new
        score = X.T @ (y - mu) / n
        if np.max(np.abs(score)) <= SCORE_TOL and _converged_ll(ll, ll_old):
            return beta, it, True, ll
    return beta, max_iter, False, ll


def _fit_negbin(X, y, offset, spec: ModelSpec, max_iter):
    """Alternate Fisher scoring in beta with a log-scale Newton step in alpha."""
    n = X.shape[0]
    yi = np.round(y).astype(np.int64)
    poisson = ModelSpec("poisson", offset_rule=spec.offset_rule, interactions=spec.interactions)
    beta0 = _initial_beta(X, y, np.exp(offset), poisson)
    beta, _, _, _ = _irls(X, y, offset, poisson, beta0, max_iter)
    mu = np.exp(X @ beta + offset)
    alpha = float(np.clip(max(_nb2.moment_alpha(y, mu), 0.01), ALPHA_MIN, ALPHA_MAX))
    lo, hi = np.log(ALPHA_MIN), np.log(ALPHA_MAX)

    def total_ll(b, a):
        m = np.exp(X @ b + offset)
        return float(np.sum(_nb2.loglik(yi, m, a))), m

    ll, mu = total_ll(beta, alpha)
    for it in range(1, max_iter + 1):
        ll_start = ll
        # coefficient step
        w = mu / (1.0 + alpha * mu)
        info = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(info, X.T @ ((y - mu) / (1.0 + alpha * mu)))
        except np.linalg.LinAlgError:
            return beta, alpha, it, False, ll
        for _ in range(40):
            ll_new, mu_new = total_ll(beta + step, alpha)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (abs(ll) + 1.0):
                break
            step = step / 2.0
        beta, mu, ll = beta + step, mu_new, ll_new
        # dispersion step on lambda = log(alpha)
        s, h = _nb2.alpha_derivs(yi, mu, alpha)
        S, H = float(np.sum(s)), float(np.sum(h))
        grad = alpha * S
        curv = alpha * alpha * H + grad
        lam = np.log(alpha)
        d = -grad / curv if curv < 0 else np.sign(grad)
        d = float(np.clip(d, -3.0, 3.0))
        for _ in range(40):
            a_new = float(np.exp(np.clip(lam + d, lo, hi)))
            ll_new, _ = total_ll(beta, a_new)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * (abs(ll) + 1.0):
                break
            d /= 2.0
        else:
            a_new, ll_new = alpha, ll
        alpha, ll = a_new, ll_new

        score_b = X.T @ ((y - mu) / (1.0 + alpha * mu)) / n
        s, _ = _nb2.alpha_derivs(yi, mu, alpha)
        S = float(np.mean(s))
        alpha_done = (abs(S) <= SCORE_TOL
                      or (alpha <= ALPHA_MIN and S < 0)
                      or (alpha >= ALPHA_MAX and S > 0))
        if np.max(np.abs(score_b)) <= SCORE_TOL and alpha_done and _converged_ll(ll, ll_start):
            return beta, alpha, it, True, ll
    return beta, alpha, max_iter, False, ll


def _safe_inv(M: np.ndarray, what: str) -> np.ndarray:
    if M.size and 1.0 / np.linalg.cond(M) < RCOND_MIN:
        raise SingularBread(f"{what} is numerically singular")
    return np.linalg.inv(M)


def fit(dataset: TrialDataset, spec: ModelSpec, *, max_iter: int = MAX_ITER,
        strict: bool = True) -> FitResult:
    """Fit ``spec`` to ``dataset`` by solving its estimating equations.

    Parameters
    ----------
    dataset : TrialDataset
    spec : ModelSpec
    max_iter : int
        Iteration cap (default 100).
    strict : bool
        Raise :class:`NonConvergence` / :class:`SeparationDetected` when the
        solver does not converge.  With ``strict=False`` an unconverged
        :class:`FitResult` is returned instead.

    Returns
    -------
    FitResult
    """
    y = dataset.y
    _check_family_data(y, spec.family)
    X = design_matrix(dataset.x, dataset.z, dataset.n_arms, spec)
    names = column_names(dataset.covariate_names or [f"x{j}" for j in range(dataset.p)],
                         dataset.n_arms, spec)
    _check_rank(X, names)
    offset = np.log(dataset.t) if spec.offset_rule == "log_followup" else np.zeros(dataset.n)
    n = dataset.n

    if spec.family == "negbin2":
        beta, alpha, iters, converged, ll = _fit_negbin(X, y, offset, spec, max_iter)
    else:
        beta0 = _initial_beta(X, y, dataset.t, spec)
        beta, iters, converged, ll = _irls(X, y, offset, spec, beta0, max_iter)
        alpha = None

    eta = X @ beta + offset
    if spec.family == "binomial" and np.max(np.abs(eta)) > 30:
        # vanishing score here means probabilities pinned at 0/1, not a finite optimum
        converged = False
    if not converged and strict:
        if spec.family == "binomial" and np.max(np.abs(eta)) > 30:
            raise SeparationDetected(
                "separation: fitted probabilities pinned at 0/1 (|linear predictor| > 30); "
                "coefficients diverge")
        raise NonConvergence(f"{spec.family} fit did not converge in {max_iter} iterations")

    mu = _inverse_link(spec.link, eta)
    if alpha is None:
        w = _mean_derivative(spec.link, mu)
        scores = X * (y - mu)[:, None]
        info = (X * w[:, None]).T @ X
        bread = -info / n
        bread_inv = _safe_inv(bread, "bread matrix")
        if spec.family == "gaussian":
            dof = n - X.shape[1]
            sigma2 = float(np.sum((y - mu) ** 2)) / (dof if dof > 0 else n)
            vcov_model = sigma2 * np.linalg.inv((X.T @ X))
        else:
            vcov_model = -bread_inv / n
    else:
        yi = np.round(y).astype(np.int64)
        w = mu / (1.0 + alpha * mu)
        s_a, h_a = _nb2.alpha_derivs(yi, mu, alpha)
        scores = np.hstack([X * ((y - mu) / (1.0 + alpha * mu))[:, None], s_a[:, None]])
        q = X.shape[1]
        bread = np.zeros((q + 1, q + 1))
        bread[:q, :q] = -((X * w[:, None]).T @ X) / n
        bread[q, q] = np.mean(h_a)
        bread_inv = _safe_inv(bread, "bread matrix")
        vcov_model = -bread_inv / n

    meat = scores.T @ scores / n
    sandwich = bread_inv @ meat @ bread_inv.T / n
    sandwich = (sandwich + sandwich.T) / 2.0
    vcov_model = (vcov_model + vcov_model.T) / 2.0

    return FitResult(
        spec=spec,
        beta_hat=_readonly(beta),
        eta_hat=None if alpha is None else float(alpha),
        scores=_readonly(scores),
        bread=_readonly(bread),
        vcov_model=_readonly(vcov_model),
        vcov_sandwich=_readonly(sandwich),
        converged=bool(converged),
        iterations=int(iters),
        loglik=float(ll),
        n=n,
        p=dataset.p,
        n_arms=dataset.n_arms,
        effectively_poisson=alpha is not None and alpha <= ALPHA_MIN,
    )


def predict_mean(fit: FitResult, x, z: int, t=1.0):
    """Expected outcome at covariates ``x`` under arm ``z`` with follow-up ``t``.

    ``x`` may be a single covariate vector or an (m x p) matrix.  With the
    log-followup offset the rate prediction is multiplied by ``t``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != fit.p:
        raise DimensionMismatch(f"expected {fit.p} covariates, got {x2.shape[1]}")
    if not 0 <= z < fit.n_arms:
        raise DimensionMismatch(f"arm {z} out of range for {fit.n_arms} arms")
    X = design_matrix(x2, z, fit.n_arms, fit.spec)
    h = _inverse_link(fit.spec.link, X @ fit.beta_hat)
    if fit.spec.offset_rule == "log_followup":
        h = h * np.asarray(t, dtype=float)
    return float(h[0]) if single else h


def mean_derivative(fit: FitResult, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Predictions on the rate scale and their gradient rows d h / d beta."""
    h = _inverse_link(fit.spec.link, X @ fit.beta_hat)
    return h, X * _mean_derivative(fit.spec.link, h)[:, None]


def score_contributions(fit: FitResult) -> np.ndarray:
    return fit.scores


def bread_matrix(fit: FitResult) -> np.ndarray:
    return fit.bread


def sandwich_vcov(fit: FitResult) -> np.ndarray:
    return fit.vcov_sandwich
