import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casecohort.cox import baseline_hazard, cumulative_hazard, fit_cox_arrays, pure_risk_value
from casecohort.influence import (
    influence_beta,
    influence_lambda0,
    influence_pure_risk,
    pure_risk_gradient,
)
from casecohort.errors import MonotoneLikelihood, SingularInformation

from oracles import finite_difference_influences, random_cohort, relative_error


def all_influences(entry, exit_, status, X, w, tau1, tau2, x):
    fit = fit_cox_arrays(entry, exit_, status, X, w, score_tol=1e-13, step_tol=1e-15, max_iter=50)
    hz = baseline_hazard(fit)
    ib = influence_beta(fit)
    il = influence_lambda0(fit, hz, ib, tau1, tau2)
    ip = influence_pure_risk(fit, hz, x, tau1, tau2, ib, il)
    return fit, np.hstack([ib.matrix, il.matrix, ip.matrix])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.integers(1, 3), sampled=st.booleans())
def test_matches_finite_differences(seed, p, sampled):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 31))
    entry, exit_, status, X = random_cohort(rng, n, p)
    w = np.ones(n)
    if sampled:
        w = np.where(status == 1, 1.0, rng.choice([0.0, 2.5], n))
        w[np.argmax(exit_)] = 2.5
    tau1 = float(np.quantile(exit_, 0.1))
    tau2 = float(np.quantile(exit_, 0.9))
    x = rng.normal(size=p) * 0.5
    try:
        _, D = all_influences(entry, exit_, status, X, w, tau1, tau2, x)
    except (MonotoneLikelihood, SingularInformation):
        return
    fd = finite_difference_influences(entry, exit_, status, X, w, tau1, tau2, x)
    for col in range(D.shape[1]):
        if np.max(np.abs(fd[:, col])) > 1e-10:
            assert relative_error(D[:, col], fd[:, col]) < 1e-3, col


def test_zero_weight_rows_vanish_and_beta_columns_sum_to_zero():
    rng = np.random.default_rng(11)
    entry, exit_, status, X = random_cohort(rng, 40, 2)
    w = np.where(status == 1, 1.0, np.where(rng.random(40) < 0.5, 0.0, 2.0))
    _, D = all_influences(entry, exit_, status, X, w, 0.5, 6.0, np.array([0.2, -0.1]))
    assert np.all(D[w == 0] == 0)
    fit, D1 = all_influences(entry, exit_, status, X, np.ones(40), 0.5, 6.0, np.array([0.2, -0.1]))
    assert np.max(np.abs(D1[:, :2].sum(axis=0))) < 1e-6 * 40
    # full-cohort linearization residual of Lambda0 and Pi vanishes as well
    assert np.max(np.abs(D1[:, 2:].sum(axis=0))) < 1e-6


def test_subject_never_at_risk_at_events_has_zero_row():
    entry = np.array([0.0, 0.0, 0.0, 10.0])
    exit_ = np.array([1.0, 2.0, 3.0, 11.0])
    status = np.array([1, 1, 0, 0])
    X = np.array([[0.3], [-0.4], [1.0], [2.0]])
    _, D = all_influences(entry, exit_, status, X, np.ones(4), 0.0, 5.0, np.array([1.0]))
    assert np.all(D[3] == 0)


def test_interval_without_events_gives_zero():
    rng = np.random.default_rng(12)
    entry, exit_, status, X = random_cohort(rng, 25, 1)
    hi = float(exit_.max())
    _, D = all_influences(entry, exit_, status, X, np.ones(25), hi + 1, hi + 2, np.array([0.5]))
    assert np.all(D[:, 1:] == 0)


def test_zero_profile_reduces_to_scaled_lambda_influence():
    rng = np.random.default_rng(13)
    entry, exit_, status, X = random_cohort(rng, 25, 2)
    fit, D = all_influences(entry, exit_, status, X, np.ones(25), 0.5, 5.0, np.zeros(2))
    lam = cumulative_hazard(baseline_hazard(fit), 0.5, 5.0)
    pi = pure_risk_value(fit.beta, np.zeros(2), lam)
    assert D[:, 3] == pytest.approx((1 - pi) * D[:, 2], abs=1e-15)


def test_lone_subject_at_risk_hand_value():
    # one covariate-free event with a single subject at risk: Lambda = 1/w0 and
    # its log-weight derivative for that subject is dN/S0 - w0 * dLambda/S0 = 0
    entry = np.array([0.0, 2.0])
    exit_ = np.array([1.0, 3.0])
    status = np.array([1, 1])
    w = np.array([2.0, 4.0])
    fit = fit_cox_arrays(entry, exit_, status, np.zeros((2, 0)), w)
    hz = baseline_hazard(fit)
    ib = influence_beta(fit)
    il = influence_lambda0(fit, hz, ib, 0.0, 1.5)
    # Lambda(0, 1.5] = w0 / w0 = 1: insensitive to the weight of subject 0
    assert cumulative_hazard(hz, 0.0, 1.5) == 1.0
    assert il.matrix[:, 0].tolist() == [0.0, 0.0]
    # a tied censored subject changes that: Lambda = w0 / (w0 + w1)
    exit2 = np.array([1.0, 1.0])
    status2 = np.array([1, 0])
    fit2 = fit_cox_arrays(np.zeros(2), exit2, status2, np.zeros((2, 0)), w)
    il2 = influence_lambda0(fit2, baseline_hazard(fit2), influence_beta(fit2), 0.0, 1.5)
    s0 = w.sum()
    assert il2.matrix[:, 0] == pytest.approx([w[0] / s0 - w[0] ** 2 / s0**2, -w[0] * w[1] / s0**2])


def test_pure_risk_gradient_by_finite_difference():
    beta = np.array([0.3, -0.2])
    x = np.array([1.0, 0.5])
    lam = 0.04
    g = pure_risk_gradient(beta, x, lam)
    eps = 1e-7
    num = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        up = pure_risk_value(beta + e[:2], x, lam + e[2])
        dn = pure_risk_value(beta - e[:2], x, lam - e[2])
        num.append((up - dn) / (2 * eps))
    assert g == pytest.approx(num, rel=1e-6)
    assert g[-1] == pytest.approx(math.exp(0.2) * math.exp(-math.exp(0.2) * lam))
