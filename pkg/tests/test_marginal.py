import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stdmarg.dataset import TrialDataset
from stdmarg.errors import DimensionMismatch, EmptyArm, NonPositiveEstimateForLogScale, NotConverged
from stdmarg.glm_core import ModelSpec, design_matrix, fit
from stdmarg.marginal import augmented, confidence_interval, gbeta, mu1, mu2, mu3

from _data import random_dataset


def _two_arm(y1, t1=None):
    """Arm 1 holds the rows of interest; arm 0 gets filler rows."""
    y = [5.0, 7.0, *y1]
    z = [0, 0] + [1] * len(y1)
    t = None if t1 is None else [1.0, 1.0, *t1]
    return TrialDataset(y=y, x=np.zeros((len(y), 0)), z=z, t=t)


def test_mu1_rate_exact_fit_has_zero_variance():
    est = mu1(_two_arm([2, 4], [1, 2]), 1)
    assert est.estimate == 2.0
    assert est.variance == 0.0
    assert (est.ci_low, est.ci_high) == (2.0, 2.0)


def test_mu1_printed_variance_drops_followup_from_residual():
    est = mu1(_two_arm([2, 4], [1, 2]), 1, printed_variance=True)
    # (1.5)^-2 2^-2 [(2-2)^2 + (4-2)^2]
    assert est.variance == pytest.approx(4 / (2.25 * 4), rel=1e-14)


def test_mu1_sample_mean():
    est = mu1(_two_arm([1, 3]), 1)
    assert est.estimate == 2.0
    assert est.variance == pytest.approx(0.5, rel=1e-14)
    assert est.variance_method == "iid_sandwich" and est.n_used == 2


def test_d4_values(d4):
    res = fit(d4, ModelSpec("gaussian"))
    fixed = mu2(d4, res, 1, "fixed_x")
    random_ = mu2(d4, res, 1, "random_x")
    assert fixed.estimate == pytest.approx(4.0, abs=1e-12)
    assert random_.variance - fixed.variance == pytest.approx(9 / 16, abs=1e-12)
    np.testing.assert_allclose(gbeta(d4, res, 1), [1.0, 0.5, 1.0], atol=1e-15)
    assert mu1(d4, 1).estimate == pytest.approx(4.0)
    assert mu3(d4, res, 1).estimate == pytest.approx(4.0, abs=1e-12)
    assert mu2(d4, res, 0).estimate == pytest.approx(mu1(d4, 0).estimate, abs=1e-12)


def test_gbeta_identity_is_average_design_row():
    d = random_dataset(np.random.default_rng(1), "gaussian", 30, k=3)
    res = fit(d, ModelSpec("gaussian"))
    X = design_matrix(d.x, 2, 3, res.spec)
    np.testing.assert_allclose(gbeta(d, res, 2), X.mean(axis=0), atol=1e-14)


def test_gbeta_log_link_at_zero_beta_is_average_design_row():
    d = random_dataset(np.random.default_rng(1), "poisson", 30)
    res = fit(d, ModelSpec("poisson"))
    zero = type(res)(**{**res.__dict__, "beta_hat": np.zeros(res.q)})
    X = design_matrix(d.x, 1, 2, res.spec)
    np.testing.assert_allclose(gbeta(d, zero, 1), X.mean(axis=0), atol=1e-14)


@pytest.mark.parametrize("family", ["gaussian", "poisson", "binomial"])
def test_saturated_model_is_direct_standardization(family):
    rng = np.random.default_rng(17)
    n = 300
    x = rng.integers(0, 2, n).astype(float)
    z = rng.integers(0, 2, n)
    if family == "gaussian":
        y = x + z + rng.normal(size=n)
    elif family == "poisson":
        y = rng.poisson(np.exp(0.2 + x - 0.5 * x * z))
    else:
        y = rng.binomial(1, 0.3 + 0.3 * x * z)
    d = TrialDataset(y=y, x=x[:, None], z=z)
    res = fit(d, ModelSpec(family, interactions=(0,)))
    for arm in (0, 1):
        oracle = sum(np.mean(x == v) * y[(x == v) & (z == arm)].mean() for v in (0, 1))
        assert mu2(d, res, arm).estimate == pytest.approx(oracle, abs=1e-9)


@pytest.mark.parametrize("followup", [False, True])
@pytest.mark.parametrize("printed", [False, True])
def test_null_working_model_collapses_to_crude(followup, printed):
    d = random_dataset(np.random.default_rng(6), "poisson", 60, k=3, followup=followup)
    for arm in range(3):
        a = augmented(d, arm, np.zeros(d.n), printed_variance=printed)
        b = mu1(d, arm, printed_variance=printed)
        assert a.estimate == pytest.approx(b.estimate, rel=1e-14)
        assert a.variance == pytest.approx(b.variance, rel=1e-12)


def test_mu3_variance_matches_formula_transcription():
    d = random_dataset(np.random.default_rng(9), "negbin2", 80, k=3, followup=True)
    res = fit(d, ModelSpec("negbin2", offset_rule="log_followup"))
    arm = 2
    X = design_matrix(d.x, arm, 3, res.spec)
    h = np.exp(X @ res.beta_hat)
    A = (d.z == arm).astype(float)
    pi, tau = A.mean(), d.t[A == 1].mean()
    m1 = np.sum(A * d.y) / np.sum(A * d.t)
    m2 = h.mean()
    m3 = m1 - np.mean((A - pi) / pi * h)
    terms = A * (d.y - m3 * d.t) - tau * (A - pi) * (h - m2)
    var = np.sum(terms**2) / (pi**2 * tau**2 * d.n**2)
    est = mu3(d, res, arm)
    assert est.estimate == pytest.approx(m3, rel=1e-13)
    assert est.variance == pytest.approx(var, rel=1e-12)
    assert est.ci_scale == "log" and est.n_used == int(A.sum())


def test_full_influence_decomposition():
    d = random_dataset(np.random.default_rng(12), "negbin2", 120, followup=True)
    res = fit(d, ModelSpec("negbin2", offset_rule="log_followup"))
    X = design_matrix(d.x, 1, 2, res.spec)
    h = np.exp(X @ res.beta_hat)
    G = np.append((X * h[:, None]).mean(axis=0), 0.0)
    psi = -res.scores @ np.linalg.inv(res.bread).T
    a, b = h - h.mean(), psi @ G
    full = mu2(d, res, 1, "full_influence").variance
    fixed = mu2(d, res, 1, "fixed_x", vcov_source="sandwich").variance
    adj = np.sum(a**2) / d.n**2
    assert full == pytest.approx(fixed + adj + 2 * np.sum(a * b) / d.n**2, rel=1e-10)


def test_full_influence_agrees_with_random_x_when_correct():
    rng = np.random.default_rng(41)
    n = 20_000
    x = rng.normal(size=(n, 2))
    z = rng.integers(0, 2, n)
    y = rng.poisson(np.exp(0.3 + x @ [0.8, -0.5] + 0.4 * z))
    d = TrialDataset(y=y, x=x, z=z)
    res = fit(d, ModelSpec("poisson"))
    for arm in (0, 1):
        full = mu2(d, res, arm, "full_influence").variance
        rnd = mu2(d, res, arm, "random_x").variance
        assert abs(full / rnd - 1) < 0.05


def test_model_vcov_source_selectable(d4):
    res = fit(d4, ModelSpec("gaussian"))
    a = mu2(d4, res, 1, "fixed_x", vcov_source="model")
    b = mu2(d4, res, 1, "fixed_x", vcov_source="sandwich")
    G = gbeta(d4, res, 1)
    assert a.variance == pytest.approx(G @ res.vcov_model @ G)
    assert b.variance == pytest.approx(G @ res.vcov_sandwich @ G)
    assert a.vcov_source == "model"


def test_no_covariates_reduces_mu2_to_crude():
    rng = np.random.default_rng(3)
    n = 90
    z = rng.integers(0, 3, n)
    y = rng.poisson(2 + z)
    d = TrialDataset(y=y, x=np.zeros((n, 0)), z=z)
    res = fit(d, ModelSpec("poisson"))
    for arm in range(3):
        fixed, rnd = mu2(d, res, arm, "fixed_x"), mu2(d, res, arm, "random_x")
        assert fixed.estimate == pytest.approx(mu1(d, arm).estimate, rel=1e-9)
        assert rnd.variance == pytest.approx(fixed.variance, abs=1e-15)


def test_confidence_intervals():
    assert confidence_interval(2.0, 0.0, "identity") == (2.0, 2.0)
    assert confidence_interval(2.0, 0.0, "log") == pytest.approx((2.0, 2.0))
    lo, hi = confidence_interval(1.0, 0.1, "log")
    assert (lo, hi) == pytest.approx((math.exp(-0.1959964), math.exp(0.1959964)), rel=1e-6)
    assert (lo, hi) == pytest.approx((0.8220, 1.2165), abs=5e-5)
    lo, hi = confidence_interval(1.536, 0.2, "identity")
    assert 1.536 - lo == pytest.approx(hi - 1.536)
    with pytest.raises(NonPositiveEstimateForLogScale):
        confidence_interval(0.0, 0.1, "log")


def test_errors(d4):
    res = fit(d4, ModelSpec("gaussian"))
    empty = TrialDataset(y=d4.y, x=d4.x, z=d4.z, n_arms=3)
    with pytest.raises(EmptyArm):
        mu1(empty, 2)
    other = TrialDataset(y=[1, 2, 3], x=[[0], [1], [0]], z=[0, 1, 1])
    with pytest.raises(DimensionMismatch):
        mu2(other, res, 1)
    unconverged = type(res)(**{**res.__dict__, "converged": False})
    with pytest.raises(NotConverged):
        mu3(d4, unconverged, 1)
    with pytest.raises(ValueError):
        mu2(d4, res, 1, "augmented")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1),
       family=st.sampled_from(["gaussian", "binomial", "poisson", "poisson_offset"]),
       k=st.integers(2, 3))
def test_canonical_identity_and_ordering(seed, family, k):
    offset = family == "poisson_offset"
    fam = "poisson" if offset else family
    d = random_dataset(np.random.default_rng(seed), fam, 60, k=k)
    if offset:
        # with varying follow-up the score weights rows by T and the identity no longer holds
        d = TrialDataset(y=d.y, x=d.x, z=d.z, t=np.full(d.n, 2.5))
    res = fit(d, ModelSpec(fam, offset_rule="log_followup" if offset else "none"), strict=False)
    if not res.converged:
        return
    for arm in range(k):
        m2 = mu2(d, res, arm, "fixed_x", ci_scale="identity")
        rnd = mu2(d, res, arm, "random_x", ci_scale="identity")
        m3 = mu3(d, res, arm, ci_scale="identity")
        assert abs(m2.estimate - m3.estimate) <= 1e-8 * max(1.0, abs(m2.estimate))
        assert rnd.variance >= m2.variance
        assert rnd.ci_low <= m2.ci_low and rnd.ci_high >= m2.ci_high
        for e in (m2, rnd, m3):
            assert e.ci_low <= e.estimate <= e.ci_high
