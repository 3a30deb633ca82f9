"""Per-subject influences on the Cox estimators.

All influences are weighted: for a subject with weight ``w_i`` the row is
the derivative of the estimator with respect to ``log w_i``. Summing outer
products of these rows gives the robust variance, and a central finite
difference in ``w_i`` reproduces each row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cox import BaselineHazard, CoxFit, risk_set_sums

BETA = "beta"
LAMBDA0 = "Lambda0"
PURE_RISK = "Pi"


@dataclass
class InfluenceSet:
    """Influence matrix (n_subjects x dim) for one estimand.

    Rows of subjects with zero weight are identically zero.
    """

    estimand: str
    matrix: np.ndarray
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _scatter(fit: CoxFit, rows: np.ndarray) -> np.ndarray:
    out = np.zeros((fit.data.n_total,) + rows.shape[1:])
    out[fit.data.rows] = rows
    return out


def _pieces(fit: CoxFit):
    data = fit.data
    sums = risk_set_sums(data, fit.beta, second=False)
    dlam = data.d / sums.S0
    mean = sums.mean
    risk = np.exp(data.X @ fit.beta)
    return data, sums, dlam, mean, risk


def score_residuals(fit: CoxFit) -> np.ndarray:
    """Unweighted per-subject score contributions ``l_i`` on fitted rows.

    ``l_i = delta_i (X_i - E(t_i)) - exp(beta'X_i) * int Y_i(t) (X_i - E(t)) dLambda0(t)``
    """
    data, sums, dlam, mean, risk = _pieces(fit)
    cum_lam = np.concatenate([[0.0], np.cumsum(dlam)])
    cum_mean = np.vstack([np.zeros(data.p), np.cumsum(dlam[:, None] * mean, axis=0)])
    at_risk_lam = data.between(cum_lam)
    at_risk_mean = cum_mean[data.hi] - cum_mean[data.lo]
    compensator = risk[:, None] * (data.X * at_risk_lam[:, None] - at_risk_mean)
    event = np.zeros_like(data.X)
    cases = data.event
    event[cases] = data.X[cases] - mean[data.k_event[cases]]
    return event - compensator


def influence_beta(fit: CoxFit) -> InfluenceSet:
    """Influence on beta: ``w_i * I^{-1} l_i`` for each subject."""
    resid = score_residuals(fit)
    L = fit.chol()
    weighted = fit.data.w[:, None] * resid
    rows = np.linalg.solve(L.T, np.linalg.solve(L, weighted.T)).T
    return InfluenceSet(BETA, _scatter(fit, rows), _scatter(fit, fit.data.w))


def lambda0_gradient(fit: CoxFit, tau1: float, tau2: float) -> np.ndarray:
    """Derivative of ``Lambda0(tau1, tau2]`` with respect to beta."""
    data, sums, dlam, mean, _ = _pieces(fit)
    inside = (data.event_times > tau1) & (data.event_times <= tau2)
    return -(dlam[inside, None] * mean[inside]).sum(axis=0)


def influence_lambda0(fit: CoxFit, hz: BaselineHazard, infl_beta: InfluenceSet, tau1: float, tau2: float) -> InfluenceSet:
    """Influence on the cumulative baseline hazard over ``(tau1, tau2]``.

    Direct part, summed over event times ``t_k`` in the interval:
    ``w_i (dN_i(t_k) - Y_i(t_k) exp(beta'X_i) dLambda0(t_k)) / S0(t_k)``;
    plus the propagation ``grad' Delta_i(beta)`` through beta.
    """
    data, sums, dlam, mean, risk = _pieces(fit)
    inside = (data.event_times > tau1) & (data.event_times <= tau2)
    per_event = np.where(inside, dlam / sums.S0, 0.0)
    cum = np.concatenate([[0.0], np.cumsum(per_event)])
    direct = -risk * data.between(cum)
    cases = data.event
    own = data.k_event[cases]
    direct[cases] += np.where(inside[own], 1.0 / sums.S0[own], 0.0)
    direct *= data.w
    grad = -(dlam[inside, None] * mean[inside]).sum(axis=0)
    rows = _scatter(fit, direct) + infl_beta.matrix @ grad
    return InfluenceSet(LAMBDA0, rows[:, None], infl_beta.weights)


def influence_pure_risk(fit: CoxFit, hz: BaselineHazard, x: np.ndarray, tau1: float, tau2: float,
                        infl_beta: InfluenceSet, infl_lambda0: InfluenceSet) -> InfluenceSet:
    """Chain rule through ``pi = 1 - exp(-exp(beta'x) Lambda0)``."""
    rows = pure_risk_influence_rows(fit.beta, x, hz_interval(hz, tau1, tau2),
                                    infl_beta.matrix, infl_lambda0.matrix[:, 0])
    return InfluenceSet(PURE_RISK, rows[:, None], infl_beta.weights)


def pure_risk_gradient(beta: np.ndarray, x: np.ndarray, cumhaz: float) -> np.ndarray:
    """Gradient of the pure risk with respect to ``(beta, Lambda0)``."""
    rh = np.exp(float(beta @ x))
    survival = np.exp(-rh * cumhaz)
    return survival * rh * np.concatenate([cumhaz * x, [1.0]])


def pure_risk_influence_rows(beta, x, cumhaz, infl_beta, infl_lambda0) -> np.ndarray:
    g = pure_risk_gradient(beta, x, cumhaz)
    return infl_beta @ g[:-1] + g[-1] * infl_lambda0


def hz_interval(hz: BaselineHazard, tau1: float, tau2: float) -> float:
    inside = (hz.event_times > tau1) & (hz.event_times <= tau2)
    return float(hz.masses[inside].sum())
