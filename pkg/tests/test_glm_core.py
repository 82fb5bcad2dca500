import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from stdmarg.dataset import TrialDataset
from stdmarg.errors import (
    InvalidFamilyData,
    InvalidModelSpec,
    NonConvergence,
    RankDeficientDesign,
    SeparationDetected,
)
from stdmarg.glm_core import (
    ModelSpec,
    bread_matrix,
    design_matrix,
    fit,
    predict_mean,
    sandwich_vcov,
    score_contributions,
)

from _data import random_dataset
from oracles import brute_force_mle, hc0, loglik_fn


def test_d4_gaussian_matches_normal_equations(d4):
    X = np.array([[1, 0, 0], [1, 1, 0], [1, 0, 1], [1, 1, 1]], float)
    oracle = np.linalg.solve(X.T @ X, X.T @ d4.y)
    np.testing.assert_allclose(oracle, [0.5, 3.0, 2.0], atol=1e-12)
    res = fit(d4, ModelSpec("gaussian"))
    np.testing.assert_allclose(res.beta_hat, oracle, atol=1e-12)
    assert res.converged and res.eta_hat is None and res.theta_dim == 3


def test_d4_sandwich_is_hc0(d4):
    res = fit(d4, ModelSpec("gaussian"))
    X = design_matrix(d4.x, d4.z, 2, res.spec)
    np.testing.assert_allclose(sandwich_vcov(res), hc0(X, d4.y, res.beta_hat), atol=1e-12)


def test_predict_mean(d4):
    res = fit(d4, ModelSpec("gaussian"))
    assert predict_mean(res, [1.0], 1) == pytest.approx(5.5, abs=1e-12)
    # arm is forced regardless of the row's own arm
    np.testing.assert_allclose(predict_mean(res, d4.x, 1), [2.5, 5.5, 2.5, 5.5])


def test_predict_mean_log_link_and_offset():
    d = TrialDataset(y=[1, 2, 3, 4], x=[[0], [1], [0], [1]], z=[0, 0, 1, 1], t=[1, 2, 1, 2])
    res = fit(d, ModelSpec("poisson", offset_rule="log_followup"))
    zero = type(res)(**{**res.__dict__, "beta_hat": np.zeros(res.q)})
    assert predict_mean(zero, [0.3], 1) == 1.0
    one = predict_mean(res, [0.7], 1, t=1.0)
    assert predict_mean(res, [0.7], 1, t=2.0) == pytest.approx(2.0 * one, rel=1e-15)


def test_design_column_order():
    spec = ModelSpec("gaussian", interactions=(1,))
    X = design_matrix(np.array([[2.0, 3.0]]), np.array([2]), 3, spec)
    # intercept, x0, x1, arm1, arm2, x1*arm1, x1*arm2
    np.testing.assert_array_equal(X, [[1, 2, 3, 0, 1, 0, 3]])


def test_rank_deficient_interaction_column():
    # covariate is zero whenever z == 1, so x:arm[1] is all zero
    d = TrialDataset(y=[0, 1, 0, 2, 0, 3], x=[[0], [1], [0], [0], [1], [0]],
                     z=[0, 0, 1, 1, 0, 1])
    with pytest.raises(RankDeficientDesign, match="x0:arm"):
        fit(d, ModelSpec("poisson", interactions=(0,)))


def test_invalid_family_data():
    d = TrialDataset(y=[1, -1, 2, 3], x=[[0], [1], [0], [1]], z=[0, 0, 1, 1])
    with pytest.raises(InvalidFamilyData):
        fit(d, ModelSpec("poisson"))
    with pytest.raises(InvalidFamilyData):
        fit(d, ModelSpec("binomial"))


@pytest.mark.parametrize("kwargs", [
    {"family": "gaussian", "link": "log"},
    {"family": "binomial", "link": "identity"},
    {"family": "gaussian", "offset_rule": "log_followup"},
    {"family": "tweedie"},
])
def test_invalid_specs(kwargs):
    with pytest.raises(InvalidModelSpec):
        ModelSpec(**kwargs)


def test_separation_detected():
    x = np.array([[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0], [-1.5], [1.5]])
    y = (x[:, 0] > 0).astype(float)
    d = TrialDataset(y=y, x=x, z=[0, 1, 0, 1, 0, 1, 1, 0])
    with pytest.raises(SeparationDetected):
        fit(d, ModelSpec("binomial"))
    assert not fit(d, ModelSpec("binomial"), strict=False).converged


def test_nonconvergence_when_iterations_capped():
    d = random_dataset(np.random.default_rng(3), "poisson", 40)
    with pytest.raises(NonConvergence):
        fit(d, ModelSpec("poisson"), max_iter=1)


@pytest.mark.parametrize("family", ["gaussian", "binomial", "poisson", "negbin2"])
def test_scores_vanish_at_solution(family):
    d = random_dataset(np.random.default_rng(11), family, 200, k=3)
    res = fit(d, ModelSpec(family))
    S = score_contributions(res)
    scale = max(1.0, np.abs(S).max())
    assert np.abs(S.sum(axis=0)).max() <= 1e-6 * scale
    for v in (res.vcov_model, res.vcov_sandwich):
        assert np.abs(v - v.T).max() <= 1e-12
        assert np.linalg.eigvalsh(v).min() >= -1e-12
    assert bread_matrix(res).shape == (res.theta_dim, res.theta_dim)


@pytest.mark.parametrize("family,offset", [("gaussian", False), ("binomial", False),
                                           ("poisson", False), ("poisson", True)])
def test_canonical_arm_residuals_sum_to_zero(family, offset):
    d = random_dataset(np.random.default_rng(5), family, 150, k=3, followup=offset)
    spec = ModelSpec(family, offset_rule="log_followup" if offset else "none")
    res = fit(d, spec)
    fitted = np.array([predict_mean(res, d.x[i], d.z[i], d.t[i]) for i in range(d.n)])
    resid = d.y - fitted
    assert abs(resid.sum()) < 1e-7
    for arm in range(d.n_arms):
        assert abs(resid[d.z == arm].sum()) < 1e-7


@pytest.mark.parametrize("family", ["gaussian", "binomial", "poisson", "negbin2"])
def test_matches_brute_force_maximizer(family):
    rng = np.random.default_rng(2)
    for _ in range(3):
        d = random_dataset(rng, family, 50)
        res = fit(d, ModelSpec(family))
        X = design_matrix(d.x, d.z, d.n_arms, res.spec)
        x0 = np.zeros(res.theta_dim)
        if family == "negbin2":
            x0[-1] = np.log(0.5)
        ref = brute_force_mle(loglik_fn(family, X, d.y), x0)
        np.testing.assert_allclose(res.beta_hat, ref[: res.q], atol=1e-6)


def test_constant_followup_only_shifts_intercept():
    rng = np.random.default_rng(8)
    base = random_dataset(rng, "poisson", 120)
    c = 2.5
    shifted = TrialDataset(y=base.y, x=base.x, z=base.z, t=np.full(base.n, c))
    spec = ModelSpec("poisson", offset_rule="log_followup")
    a, b = fit(base, spec), fit(shifted, spec)
    assert b.beta_hat[0] == pytest.approx(a.beta_hat[0] - np.log(c), abs=1e-8)
    np.testing.assert_allclose(b.beta_hat[1:], a.beta_hat[1:], atol=1e-8)


def test_negbin_recovers_dispersion():
    rng = np.random.default_rng(21)
    n = 20000
    x = rng.integers(0, 2, n).astype(float)
    z = rng.integers(0, 2, n)
    mu = np.exp(0.5 + x + 0.5 * z)
    y = rng.poisson(rng.gamma(2.0, 0.5, n) * mu)
    res = fit(TrialDataset(y=y, x=x[:, None], z=z), ModelSpec("negbin2"))
    se = np.sqrt(np.diag(res.vcov_model))
    assert abs(res.eta_hat - 0.5) < 4 * se[-1]
    np.testing.assert_allclose(res.beta_hat, [0.5, 1.0, 0.5], atol=4 * se[:3].max())


def test_negbin_on_poisson_data_is_effectively_poisson():
    rng = np.random.default_rng(4)
    n = 3000
    x = rng.integers(0, 2, n).astype(float)
    z = rng.integers(0, 2, n)
    # underdispersed counts push alpha to its lower clamp
    y = rng.binomial(4, 0.5 * np.exp(-x))
    d = TrialDataset(y=y, x=x[:, None], z=z)
    res = fit(d, ModelSpec("negbin2"))
    pois = fit(d, ModelSpec("poisson"))
    assert res.effectively_poisson
    np.testing.assert_allclose(res.beta_hat, pois.beta_hat, atol=1e-6)


def test_poisson_large_sample_against_generic_optimizer():
    from stdmarg.trial_sim import RandomizationScheme, ScenarioSpec, generate_scenario

    d = generate_scenario(ScenarioSpec(4, n=100_000), RandomizationScheme(), 99, 0)
    res = fit(d, ModelSpec("poisson", offset_rule="log_followup"))
    X = design_matrix(d.x, d.z, 2, res.spec)
    off = np.log(d.t)

    def nll(b):
        eta = X @ b + off
        return np.sum(np.exp(eta) - d.y * eta) / d.n

    ref = optimize.minimize(nll, np.zeros(3), method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 20000}).x
    se = np.sqrt(np.diag(res.vcov_sandwich))
    assert np.all(np.abs(res.beta_hat - ref) < 3 * se)
    np.testing.assert_allclose(res.beta_hat, ref, atol=1e-5)


def test_poisson_sandwich_matches_model_vcov_when_correct():
    rng = np.random.default_rng(31)
    n = 100_000
    x = rng.normal(size=(n, 1))
    z = rng.integers(0, 2, n)
    y = rng.poisson(np.exp(0.2 + 0.5 * x[:, 0] + 0.3 * z))
    res = fit(TrialDataset(y=y, x=x, z=z), ModelSpec("poisson"))
    np.testing.assert_allclose(np.diag(res.vcov_sandwich), np.diag(res.vcov_model), rtol=0.05)
    # off-diagonals are near zero, so compare them on the correlation scale
    sd = np.sqrt(np.diag(res.vcov_model))
    diff = (res.vcov_sandwich - res.vcov_model) / np.outer(sd, sd)
    assert np.abs(diff).max() < 0.05


def test_fit_result_is_immutable(d4):
    res = fit(d4, ModelSpec("gaussian"))
    with pytest.raises(ValueError):
        res.beta_hat[0] = 1.0
    with pytest.raises(AttributeError):
        res.converged = False


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 40))
def test_gaussian_equals_least_squares(seed, n):
    d = random_dataset(np.random.default_rng(seed), "gaussian", n)
    spec = ModelSpec("gaussian")
    X = design_matrix(d.x, d.z, d.n_arms, spec)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        with pytest.raises(RankDeficientDesign):
            fit(d, spec)
        return
    ref = np.linalg.lstsq(X, d.y, rcond=None)[0]
    np.testing.assert_allclose(fit(d, spec).beta_hat, ref, atol=1e-8)
