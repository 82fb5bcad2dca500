"""Marginal mean estimators for one arm of a randomized trial.

``mu1`` is the crude arm mean (rate, with follow-up), ``mu2`` standardizes
model predictions over every patient's covariates, and ``mu3`` augments the
crude estimator with a mean-zero term built from the same predictions.

Rates: predictions are always on the unit follow-up scale, so with a
log-followup offset every estimator targets the event rate per unit time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.stats import norm

from .dataset import TrialDataset
from .errors import DimensionMismatch, NonPositiveEstimateForLogScale, NotConverged
from .glm_core import FitResult, design_matrix, mean_derivative

ESTIMATORS = ("mu1", "mu2", "mu3")
VARIANCE_METHODS = ("iid_sandwich", "fixed_x", "random_x", "full_influence", "augmented")
MU2_METHODS = ("fixed_x", "random_x", "full_influence")


@dataclass(frozen=True)
class MarginalEstimate:
    arm: int
    estimator: str
    estimate: float
    variance: float
    variance_method: str
    ci_low: float
    ci_high: float
    ci_scale: str
    n_used: int
    ci_level: float = 0.95
    vcov_source: Optional[str] = None

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))

    def to_dict(self) -> dict:
        return asdict(self)


def confidence_interval(estimate: float, se: float, scale: str = "identity",
                        level: float = 0.95) -> Tuple[float, float]:
    """Wald interval; on the log scale the delta-method SE is ``se / estimate``."""
    zq = float(norm.ppf(0.5 + level / 2.0))
    if scale == "identity":
        return estimate - zq * se, estimate + zq * se
    if scale == "log":
        if not estimate > 0:
            raise NonPositiveEstimateForLogScale(
                f"log-scale interval needs a positive estimate, got {estimate}")
        half = zq * se / estimate
        return float(np.exp(np.log(estimate) - half)), float(np.exp(np.log(estimate) + half))
    raise ValueError(f"unknown ci scale {scale!r}")


def _default_scale(fit: Optional[FitResult]) -> str:
    if fit is not None and fit.spec.family in ("poisson", "negbin2"):
        return "log"
    return "identity"


def _make(arm, estimator, est, var, method, scale, level, n_used, vcov_source=None):
    var = max(float(var), 0.0)
    lo, hi = confidence_interval(float(est), float(np.sqrt(var)), scale, level)
    return MarginalEstimate(arm=int(arm), estimator=estimator, estimate=float(est),
                            variance=var, variance_method=method, ci_low=lo, ci_high=hi,
                            ci_scale=scale, n_used=int(n_used), ci_level=level,
                            vcov_source=vcov_source)


def _check_fit(dataset: TrialDataset, fit: FitResult) -> None:
    if (fit.n, fit.p, fit.n_arms) != (dataset.n, dataset.p, dataset.n_arms):
        raise DimensionMismatch(
            f"fit was on n={fit.n}, p={fit.p}, k={fit.n_arms}; dataset has "
            f"n={dataset.n}, p={dataset.p}, k={dataset.n_arms}")
    if not fit.converged:
        raise NotConverged("outcome model fit did not converge")


def arm_predictions(dataset: TrialDataset, fit: FitResult, z: int):
    """Predictions h(X_i, z, beta) for every patient plus their beta-gradients."""
    _check_fit(dataset, fit)
    dataset.arm_mask(z)
    X = design_matrix(dataset.x, z, dataset.n_arms, fit.spec)
    return mean_derivative(fit, X)


def mu1(dataset: TrialDataset, z: int, *, ci_scale: str = "identity", level: float = 0.95,
        printed_variance: bool = False) -> MarginalEstimate:
    """Crude arm mean, or event rate when follow-up varies.

    The default variance uses residuals ``y - mu1 * t``; ``printed_variance``
    switches to ``y - mu1`` (identical when every ``t`` is one).
    """
    a = dataset.arm_mask(z)
    y, t = dataset.y[a], dataset.t[a]
    n_z = int(a.sum())
    tau = t.mean()
    est = y.sum() / t.sum()
    resid = y - est if printed_variance else y - est * t
    var = np.sum(resid**2) / (tau**2 * n_z**2)
    return _make(z, "mu1", est, var, "iid_sandwich", ci_scale, level, n_z)


def gbeta(dataset: TrialDataset, fit: FitResult, z: int) -> np.ndarray:
    """Average gradient of the arm-z prediction with respect to beta."""
    _, D = arm_predictions(dataset, fit, z)
    return D.mean(axis=0)


def mu2(dataset: TrialDataset, fit: FitResult, z: int, method: str = "random_x", *,
        vcov_source: str = "sandwich", ci_scale: Optional[str] = None,
        level: float = 0.95) -> MarginalEstimate:
    """Standardization (g-computation) estimate of the arm-z marginal mean.

    Parameters
    ----------
    method : {"fixed_x", "random_x", "full_influence"}
        ``fixed_x`` is the delta-method variance conditional on the observed
        covariates; ``random_x`` adds ``n^-2 sum (h_i - mu2)^2``;
        ``full_influence`` uses the joint influence function of the model
        parameters and the covariate average.
    vcov_source : {"sandwich", "model"}
        Covariance of beta used by ``fixed_x`` and ``random_x``.
    """
    if method not in MU2_METHODS:
        raise ValueError(f"mu2 variance method must be one of {MU2_METHODS}, got {method!r}")
    h, D = arm_predictions(dataset, fit, z)
    n = dataset.n
    est = h.mean()
    if method == "full_influence":
        psi = -np.linalg.solve(fit.bread, fit.scores.T).T
        g_theta = np.zeros(fit.theta_dim)
        g_theta[: fit.q] = D.mean(axis=0)
        infl = h - est + psi @ g_theta
        var = np.sum(infl**2) / n**2
        source = None
    else:
        G = D.mean(axis=0)
        var = G @ fit.vcov_beta(vcov_source) @ G
        if method == "random_x":
            var += np.sum((h - est) ** 2) / n**2
        source = vcov_source
    scale = ci_scale or _default_scale(fit)
    return _make(z, "mu2", est, var, method, scale, level, n, source)


def augmented(dataset: TrialDataset, z: int, h: np.ndarray, *, ci_scale: str = "identity",
              level: float = 0.95, printed_variance: bool = False) -> MarginalEstimate:
    """Augmented estimate for arm ``z`` from arbitrary working predictions ``h``.

    ``h`` holds predictions at arm ``z`` for every patient on the unit
    follow-up scale.  ``h = 0`` gives back the crude estimator exactly.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (dataset.n,):
        raise DimensionMismatch(f"need {dataset.n} predictions, got shape {h.shape}")
    a = dataset.arm_mask(z).astype(float)
    y, t = dataset.y, dataset.t
    n = dataset.n
    pi = a.mean()
    tau = t[a > 0].mean()
    crude = np.sum(a * y) / np.sum(a * t)
    standardized = h.mean()
    est = crude - np.mean((a - pi) / pi * h)
    resid = a * (y - est) if printed_variance else a * (y - est * t)
    term = resid - tau * (a - pi) * (h - standardized)
    var = np.sum(term**2) / (pi**2 * tau**2 * n**2)
    return _make(z, "mu3", est, var, "augmented", ci_scale, level, int(a.sum()))


def mu3(dataset: TrialDataset, fit: FitResult, z: int, *, ci_scale: Optional[str] = None,
        level: float = 0.95, printed_variance: bool = False) -> MarginalEstimate:
    """Augmented estimator using a single working model fitted across all arms."""
    h, _ = arm_predictions(dataset, fit, z)
    return augmented(dataset, z, h, ci_scale=ci_scale or _default_scale(fit), level=level,
                     printed_variance=printed_variance)
