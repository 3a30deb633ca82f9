import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from casecohort.cox import (
    BaselineHazard,
    CoxData,
    baseline_hazard,
    cumulative_hazard,
    fit_cox_arrays,
    pure_risk,
    pure_risk_value,
    risk_set_sums,
)
from casecohort.data_model import RiskProfile
from casecohort.errors import InvariantViolation, MonotoneLikelihood, NonConvergence, SingularInformation

from oracles import brute_force_beta, naive_breslow_cumhaz, naive_loglik, naive_score, random_cohort


def test_symmetric_risk_sets_give_zero_beta():
    entry = np.array([0.0, 0.0, 2.0, 2.0])
    exit_ = np.array([1.0, 1.5, 3.5, 3.0])
    status = np.array([1, 0, 0, 1])
    X = np.array([[1.0], [0.0], [1.0], [0.0]])
    fit = fit_cox_arrays(entry, exit_, status, X, np.ones(4))
    assert fit.iterations == 0
    assert fit.beta[0] == 0.0


def test_constant_covariate_is_singular():
    entry, exit_, status, _ = random_cohort(np.random.default_rng(0), 12, 1)
    with pytest.raises(SingularInformation):
        fit_cox_arrays(entry, exit_, status, np.ones((12, 1)), np.ones(12))


def test_ten_subjects_match_golden_section_search():
    rng = np.random.default_rng(3)
    entry, exit_, status, X = random_cohort(rng, 10, 1, truncated=False)
    fit = fit_cox_arrays(entry, exit_, status, X, np.ones(10), score_tol=1e-12)
    res = optimize.minimize_scalar(
        lambda b: -naive_loglik(np.array([b]), entry, exit_, status, X, np.ones(10)),
        bounds=(-10, 10), method="bounded", options={"xatol": 1e-10},
    )
    assert abs(fit.beta[0] - res.x) < 1e-6


def test_monotone_likelihood_is_reported():
    exit_ = np.arange(1.0, 9.0)
    status = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    X = np.array([[1.0]] * 4 + [[0.0]] * 4)
    with pytest.raises(MonotoneLikelihood):
        fit_cox_arrays(np.zeros(8), exit_, status, X, np.ones(8))


def test_non_convergence_names_iterations():
    rng = np.random.default_rng(4)
    entry, exit_, status, X = random_cohort(rng, 30, 2)
    with pytest.raises(NonConvergence) as err:
        fit_cox_arrays(entry, exit_, status, X, np.ones(30), max_iter=1, score_tol=1e-14, step_tol=0)
    assert err.value.iterations == 1


def test_single_lone_subject_mass():
    # only subject 0 is at risk at its event time
    entry = np.array([0.0, 2.0])
    exit_ = np.array([1.0, 3.0])
    X = np.array([[0.7], [-0.2]])
    w = np.array([2.5, 1.0])
    data = CoxData(entry, exit_, np.array([1, 0]), X, w)
    beta = np.array([0.3])
    s = risk_set_sums(data, beta)
    assert s.S0[0] == pytest.approx(w[0] * math.exp(0.3 * 0.7))
    # mass is weighted count over S0; with the event weighted by w this is 1/exp(beta'x)
    assert data.d[0] / s.S0[0] == pytest.approx(1 / math.exp(0.21))


def test_nelson_aalen_at_beta_zero():
    entry = np.zeros(6)
    exit_ = np.array([1.0, 2.0, 2.0, 3.0, 4.0, 5.0])
    status = np.array([1, 1, 1, 0, 1, 0])
    fit = fit_cox_arrays(entry, exit_, status, np.zeros((6, 0)), np.ones(6))
    hz = baseline_hazard(fit)
    assert hz.event_times.tolist() == [1.0, 2.0, 4.0]
    assert hz.masses.tolist() == pytest.approx([1 / 6, 2 / 5, 1 / 2])


def test_six_subjects_hand_computed_masses():
    entry = np.array([0.0, 0.0, 0.5, 0.0, 1.5, 0.0])
    exit_ = np.array([1.0, 2.0, 2.5, 3.0, 3.5, 4.0])
    status = np.array([1, 0, 1, 0, 1, 0])
    X = np.array([[0.0], [1.0], [1.0], [0.0], [2.0], [1.0]])
    w = np.array([1.0, 2.0, 1.0, 2.0, 1.0, 2.0])
    fit = fit_cox_arrays(entry, exit_, status, X, w, score_tol=1e-12)
    b = fit.beta[0]
    e = np.exp(b * X[:, 0])
    expected = [
        1.0 / (w[[0, 1, 2, 3, 5]] @ e[[0, 1, 2, 3, 5]]),  # t=1.0: subject 4 not yet entered
        1.0 / (w[2:] @ e[2:]),  # t=2.5: subjects 2..5
        1.0 / (w[4:] @ e[4:]),  # t=3.5: subjects 4, 5
    ]
    assert baseline_hazard(fit).masses.tolist() == pytest.approx(expected, rel=1e-12)


def test_cumulative_hazard_interval_convention():
    hz = BaselineHazard(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.4]))
    assert cumulative_hazard(hz, 3.5, 9.0) == 0.0
    assert cumulative_hazard(hz, 0.0, 3.0) == pytest.approx(0.7)
    assert cumulative_hazard(hz, 1.0, 2.0) == pytest.approx(0.2)
    with pytest.raises(InvariantViolation):
        cumulative_hazard(hz, 2.0, 2.0)


def test_pure_risk_formula():
    assert pure_risk_value(np.array([0.5]), np.array([1.0]), 0.0) == 0.0
    assert pure_risk_value(np.array([0.5]), np.array([0.0]), 0.01) == pytest.approx(0.00995, abs=1e-5)
    assert pure_risk_value(np.array([0.5]), np.array([0.0]), 0.01) == -math.expm1(-0.01)


def test_pure_risk_recomposition():
    rng = np.random.default_rng(5)
    entry, exit_, status, X = random_cohort(rng, 25, 2)
    fit = fit_cox_arrays(entry, exit_, status, X, np.ones(25), covariates=("a", "b"))
    hz = baseline_hazard(fit)
    prof = RiskProfile({"a": 0.3, "b": -1.0}, 1.0, 4.0)
    lam = naive_breslow_cumhaz(fit.beta, entry, exit_, status, X, np.ones(25), 1.0, 4.0)
    expected = 1 - math.exp(-math.exp(0.3 * fit.beta[0] - fit.beta[1]) * lam)
    assert pure_risk(fit, hz, prof) == pytest.approx(expected, rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.integers(1, 3))
def test_score_vanishes_and_matches_brute_force(seed, p):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(15, 51))
    entry, exit_, status, X = random_cohort(rng, n, p)
    w = rng.uniform(0.5, 3.0, n)
    try:
        fit = fit_cox_arrays(entry, exit_, status, X, w)
    except (MonotoneLikelihood, SingularInformation):
        return
    assert np.max(np.abs(naive_score(fit.beta, entry, exit_, status, X, w))) < 1e-7
    if np.max(np.abs(fit.beta)) < 5:
        assert np.max(np.abs(fit.beta - brute_force_beta(entry, exit_, status, X, w))) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.floats(-3, 3))
def test_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    entry, exit_, status, X = random_cohort(rng, 30, 2)
    fit = fit_cox_arrays(entry, exit_, status, X, np.ones(30), score_tol=1e-12)
    Xs = X.copy()
    Xs[:, 0] += shift
    fits = fit_cox_arrays(entry, exit_, status, Xs, np.ones(30), score_tol=1e-12)
    assert fits.beta == pytest.approx(fit.beta, abs=1e-8)
    ratio = baseline_hazard(fits).masses / baseline_hazard(fit).masses
    assert ratio == pytest.approx(np.exp(-fit.beta[0] * shift) * np.ones_like(ratio), rel=1e-7)
    x = np.array([0.4, -0.3])
    lo, hi = float(exit_.min()), float(exit_.max())
    lam = cumulative_hazard(baseline_hazard(fit), lo, hi)
    lams = cumulative_hazard(baseline_hazard(fits), lo, hi)
    xs = x + np.array([shift, 0.0])
    assert pure_risk_value(fits.beta, xs, lams) == pytest.approx(pure_risk_value(fit.beta, x, lam), rel=1e-7)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_pure_risk_monotone_in_tau2(seed):
    rng = np.random.default_rng(seed)
    entry, exit_, status, X = random_cohort(rng, 30, 1)
    fit = fit_cox_arrays(entry, exit_, status, X, np.ones(30))
    hz = baseline_hazard(fit)
    grid = np.linspace(exit_.min(), exit_.max() + 1, 25)
    risks = [pure_risk_value(fit.beta, np.array([0.5]), cumulative_hazard(hz, grid[0], t)) for t in grid[1:]]
    assert np.all(np.diff(risks) >= 0)


def test_risk_set_mean_in_convex_hull():
    rng = np.random.default_rng(6)
    entry, exit_, status, X = random_cohort(rng, 40, 1)
    data = CoxData(entry, exit_, status, X, np.ones(40))
    mean = risk_set_sums(data, np.array([0.8])).mean[:, 0]
    for k, t in enumerate(data.event_times):
        at_risk = X[(entry < t) & (t <= exit_), 0]
        assert at_risk.min() - 1e-12 <= mean[k] <= at_risk.max() + 1e-12
