"""Weighted Cox partial likelihood with Breslow ties and left truncation.

Risk-set sums at the distinct event times are accumulated with interval
prefix sums: subject ``i`` is at risk at the event times with index
``lo[i] <= k < hi[i]``, so every sum over a risk set is a difference of
suffix sums. One Newton step costs O(n p^2) instead of O(n D p^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_model import CohortTable, RiskProfile
from .errors import InvariantViolation, MonotoneLikelihood, NonConvergence, SingularInformation

SCORE_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 25
MAX_HALVING = 10
DIVERGENCE_BOUND = 50.0
PENDING_STEP_BOUND = 1e-3
PIVOT_TOL = 1e-12


class CoxData:
    """Prepared arrays for the subjects with positive weight.

    Parameters
    ----------
    entry, exit, status : array_like
        Follow-up for all ``n`` subjects.
    X : array_like
        (n, p) covariate matrix; rows with zero weight may contain NaN.
    weights : array_like
        Nonnegative weights; zero-weight subjects are dropped.
    """

    def __init__(self, entry, exit, status, X, weights):
        weights = np.asarray(weights, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.n_total = len(weights)
        self.rows = np.flatnonzero(weights > 0)
        self.w = weights[self.rows]
        self.X = X[self.rows]
        if not np.all(np.isfinite(self.X)):
            bad = int(self.rows[np.argmax(~np.isfinite(self.X).all(axis=1))]) + 1
            raise InvariantViolation(bad, "model covariate missing for a subject with positive weight")
        self.entry = np.asarray(entry, dtype=float)[self.rows]
        self.exit = np.asarray(exit, dtype=float)[self.rows]
        self.event = np.asarray(status)[self.rows] == 1
        self.event_times = np.unique(self.exit[self.event])
        if len(self.event_times) == 0:
            raise InvariantViolation(None, "no events among subjects with positive weight")
        self.lo = np.searchsorted(self.event_times, self.entry, side="right")
        self.hi = np.searchsorted(self.event_times, self.exit, side="right")
        # index of own event time for cases
        self.k_event = np.where(self.event, self.hi - 1, -1)
        D = len(self.event_times)
        self.d = np.bincount(self.k_event[self.event], weights=self.w[self.event], minlength=D)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def D(self) -> int:
        return len(self.event_times)

    def risk_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` (length m or (m, c)) over the risk set of each event time."""
        values = np.asarray(values, dtype=float)
        squeeze = values.ndim == 1
        if squeeze:
            values = values[:, None]
        D = self.D
        out = np.empty((D, values.shape[1]))
        for c in range(values.shape[1]):
            add = np.bincount(self.hi, weights=values[:, c], minlength=D + 1)
            sub = np.bincount(self.lo, weights=values[:, c], minlength=D + 1)
            # subjects with hi > k minus subjects with lo > k
            out[:, c] = np.cumsum(add[::-1])[::-1][1:] - np.cumsum(sub[::-1])[::-1][1:]
        return out[:, 0] if squeeze else out

    def between(self, cumulative: np.ndarray) -> np.ndarray:
        """Per-subject sum over its at-risk event times, given the prefix sums
        ``cumulative`` (length D+1, ``cumulative[0] == 0``)."""
        return cumulative[self.hi] - cumulative[self.lo]


@dataclass
class RiskSetSums:
    """Weighted risk-set moments at each distinct event time.

    ``S0`` and ``S1`` are reported on the true scale; internally a common
    factor ``exp(shift)`` keeps ``exp(beta'x)`` finite.
    """

    S0: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    shift: float = 0.0

    @property
    def mean(self) -> np.ndarray:
        """Risk-set weighted covariate mean ``S1/S0`` (D, p)."""
        return self.S1 / self.S0[:, None]


def risk_set_sums(data: CoxData, beta: np.ndarray, second: bool = True) -> RiskSetSums:
    eta = data.X @ beta
    shift = float(eta.max())
    r = data.w * np.exp(eta - shift)
    p = data.p
    cols = [r[:, None], r[:, None] * data.X]
    if second:
        cols.append((r[:, None, None] * data.X[:, :, None] * data.X[:, None, :]).reshape(len(data.X), p * p))
    sums = data.risk_sum(np.hstack(cols))
    S0s = sums[:, 0]
    if np.any(S0s <= 0):
        raise InvariantViolation(None, "empty risk set at an event time")
    scale = np.exp(shift)
    S1 = sums[:, 1 : 1 + p]
    S2 = sums[:, 1 + p :].reshape(len(sums), p, p) if second else np.zeros((data.D, p, p))
    return RiskSetSums(S0s * scale, S1 * scale, S2 * scale, shift)


def _loglik_score_info(data: CoxData, beta: np.ndarray):
    eta = data.X @ beta
    shift = float(eta.max())
    r = data.w * np.exp(eta - shift)
    p = data.p
    outer = (data.X[:, :, None] * data.X[:, None, :]).reshape(len(data.X), p * p)
    sums = data.risk_sum(np.hstack([r[:, None], r[:, None] * data.X, r[:, None] * outer]))
    S0 = sums[:, 0]
    if np.any(S0 <= 0):
        raise InvariantViolation(None, "empty risk set at an event time")
    mean = sums[:, 1 : 1 + p] / S0[:, None]
    second = sums[:, 1 + p :].reshape(len(sums), p, p) / S0[:, None, None]
    we = data.w * data.event
    loglik = float(we @ eta - data.d @ (np.log(S0) + shift))
    score = we @ data.X - data.d @ mean
    info = np.einsum("k,kij->ij", data.d, second - mean[:, :, None] * mean[:, None, :])
    return loglik, score, 0.5 * (info + info.T)


def _cholesky(info: np.ndarray) -> np.ndarray:
    if info.shape == (0, 0):
        return info
    scale = float(np.max(np.diag(info))) if info.size else 0.0
    if not scale > 0:
        raise SingularInformation("information matrix has no positive diagonal entry")
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise SingularInformation("information matrix is not positive definite") from None
    if np.min(np.diag(L)) ** 2 < PIVOT_TOL * scale:
        raise SingularInformation("information matrix is numerically singular")
    return L


def _solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


@dataclass
class CoxFit:
    """Result of :func:`fit_cox`.

    ``information`` is the negative Jacobian of the weighted score at
    ``beta``.
    """

    beta: np.ndarray
    score_at_beta: np.ndarray
    information: np.ndarray
    iterations: int
    converged: bool
    loglik: float
    covariates: tuple[str, ...] = ()
    data: CoxData | None = field(default=None, repr=False)

    def chol(self) -> np.ndarray:
        return _cholesky(self.information)


def fit_cox_arrays(
    entry,
    exit,
    status,
    X,
    weights,
    covariates: Sequence[str] = (),
    score_tol: float = SCORE_TOL,
    step_tol: float = STEP_TOL,
    max_iter: int = MAX_ITER,
) -> CoxFit:
    """Solve the weighted partial-likelihood score equation by Newton-Raphson.

    Starts from ``beta = 0``. A step is halved (up to 10 times) while the
    log partial likelihood fails to increase. Iteration stops when
    ``max|U| < score_tol`` or the step max-norm is below ``step_tol``; the
    score and information are then re-evaluated at the final ``beta``.
    """
    data = CoxData(entry, exit, status, X, weights)
    beta = np.zeros(data.p)
    loglik, score, info = _loglik_score_info(data, beta)
    converged = False
    it = 0
    while it < max_iter:
        if np.max(np.abs(score), initial=0.0) < score_tol:
            converged = True
            break
        it += 1
        step = _solve(_cholesky(info), score)
        new = beta + step
        new_loglik, new_score, new_info = _loglik_score_info(data, new)
        halvings = 0
        while not new_loglik >= loglik and halvings < MAX_HALVING:
            step = step / 2
            new = beta + step
            new_loglik, new_score, new_info = _loglik_score_info(data, new)
            halvings += 1
        beta, loglik, score, info = new, new_loglik, new_score, new_info
        if np.max(np.abs(beta)) > DIVERGENCE_BOUND:
            raise MonotoneLikelihood(f"|beta| exceeded {DIVERGENCE_BOUND}: likelihood is monotone")
        if np.max(np.abs(step)) < step_tol:
            converged = True
            break
    if not converged:
        if np.max(np.abs(score), initial=0.0) < score_tol:
            converged = True
        else:
            raise NonConvergence(it, float(np.max(np.abs(score))))
    L = _cholesky(info)
    # a vanishing score with a still-large Newton step means the information
    # decays with the score: the likelihood keeps rising along a direction
    pending = _solve(L, score)
    if np.max(np.abs(pending), initial=0.0) > PENDING_STEP_BOUND:
        raise MonotoneLikelihood(
            f"score vanished with Newton step {np.max(np.abs(pending)):.3g} pending: likelihood is monotone"
        )
    return CoxFit(beta, score, info, it, converged, loglik, tuple(covariates), data)


def fit_cox(cohort: CohortTable, weights, covariates: Sequence[str], **options) -> CoxFit:
    """Fit the Cox model on ``cohort`` with per-subject ``weights``."""
    X = cohort.matrix(covariates)
    return fit_cox_arrays(cohort.entry, cohort.exit, cohort.status, X, weights, covariates, **options)


@dataclass(frozen=True)
class BaselineHazard:
    """Breslow point masses of the baseline hazard at distinct event times."""

    event_times: np.ndarray
    masses: np.ndarray

    def cumulative(self, t) -> np.ndarray:
        """Cumulative hazard on ``(-inf, t]``."""
        cum = np.concatenate([[0.0], np.cumsum(self.masses)])
        return cum[np.searchsorted(self.event_times, t, side="right")]


def baseline_hazard(fit: CoxFit) -> BaselineHazard:
    """Breslow estimator: weighted event count over ``S0`` at each event time,
    using the weights of the fit."""
    sums = risk_set_sums(fit.data, fit.beta, second=False)
    return BaselineHazard(fit.data.event_times.copy(), fit.data.d / sums.S0)


def cumulative_hazard(hz: BaselineHazard, tau1: float, tau2: float) -> float:
    """Sum of masses at event times in ``(tau1, tau2]``."""
    if not tau1 < tau2:
        raise InvariantViolation(None, f"tau1={tau1} must be < tau2={tau2}")
    inside = (hz.event_times > tau1) & (hz.event_times <= tau2)
    return float(hz.masses[inside].sum())


def pure_risk_value(beta: np.ndarray, x: np.ndarray, cumhaz: float) -> float:
    return float(-np.expm1(-np.exp(float(beta @ x)) * cumhaz))


def pure_risk(fit: CoxFit, hz: BaselineHazard, profile: RiskProfile) -> float:
    """``1 - exp(-exp(beta'x) * Lambda0(tau1, tau2])``."""
    x = profile.vector(fit.covariates)
    return pure_risk_value(fit.beta, x, cumulative_hazard(hz, profile.tau1, profile.tau2))
