"""Weight calibration: phase-two prediction, auxiliary variables, raking,
and the variance of estimators computed with calibrated weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .cox import fit_cox_arrays
from .data_model import CohortTable, SamplingDesign
from .errors import (
    CalibrationNonConvergence,
    CalibrationSingular,
    InvariantViolation,
    NonConvergence,
    SeparableLogistic,
    SingularDesign,
)
from .influence import influence_beta
from .variance import sampling_term

LINEAR = "linear"
LOGISTIC = "logistic"
MULTINOMIAL = "multinomial"

BRESLOW = "Breslow"
SHIN = "Shin"
USER = "UserProvided"

RAKE_TOL = 1e-8
RAKE_MAX_ITER = 50
COEF_BOUND = 30.0


# --- prediction of phase-two covariates ----------------------------------


@dataclass
class PredictionModel:
    target: str
    kind: str
    predictors: tuple[str, ...]
    coefficients: np.ndarray
    levels: np.ndarray | None = None

    def predict(self, Z: np.ndarray) -> np.ndarray:
        design = np.column_stack([np.ones(len(Z)), Z])
        if self.kind == LINEAR:
            return design @ self.coefficients
        if self.kind == LOGISTIC:
            return expit(design @ self.coefficients)
        eta = np.column_stack([np.zeros(len(Z)), design @ self.coefficients.T])
        probs = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
        return probs @ self.levels


def infer_kind(values: np.ndarray) -> str:
    """Linear for continuous targets, logistic for 0/1, multinomial for
    integer codes with 3 to 10 levels."""
    levels = np.unique(values)
    if np.all(np.isin(levels, (0.0, 1.0))):
        return LOGISTIC
    if 3 <= len(levels) <= 10 and np.all(levels == np.round(levels)):
        return MULTINOMIAL
    return LINEAR


def _check_rank(design: np.ndarray, target: str):
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesign(f"prediction design for {target!r} is rank deficient")


def _fit_linear(design, y, w, target):
    _check_rank(design, target)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    return coef


def _newton(grad_hess, k, target, max_iter=50, tol=1e-10):
    coef = np.zeros(k)
    for _ in range(max_iter):
        g, H = grad_hess(coef)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise SeparableLogistic(f"logistic Hessian for {target!r} is singular") from None
        coef = coef + step
        if np.max(np.abs(coef)) > COEF_BOUND:
            raise SeparableLogistic(f"logistic coefficients for {target!r} diverge (separation)")
        if np.max(np.abs(step)) < tol:
            return coef
    raise NonConvergence(max_iter, float(np.max(np.abs(g))), stage="prediction")


def _fit_logistic(design, y, w, target):
    _check_rank(design, target)

    def grad_hess(b):
        p = expit(design @ b)
        return design.T @ (w * (y - p)), (design * (w * p * (1 - p))[:, None]).T @ design

    return _newton(grad_hess, design.shape[1], target)


def _fit_multinomial(design, y, w, target, levels):
    _check_rank(design, target)
    K, q = len(levels), design.shape[1]
    Y = (y[:, None] == levels[None, 1:]).astype(float)

    def grad_hess(flat):
        B = flat.reshape(K - 1, q)
        eta = np.column_stack([np.zeros(len(y)), design @ B.T])
        P = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))[:, 1:]
        g = ((Y - P) * w[:, None]).T @ design
        H = np.zeros((K - 1, q, K - 1, q))
        for a in range(K - 1):
            for b in range(K - 1):
                c = P[:, a] * ((a == b) - P[:, b]) * w
                H[a, :, b, :] = (design * c[:, None]).T @ design
        return g.ravel(), H.reshape((K - 1) * q, (K - 1) * q)

    return _newton(grad_hess, (K - 1) * q, target).reshape(K - 1, q)


def predict_phase2(cohort: CohortTable, weights, predictors: Mapping[str, Sequence[str]],
                   kinds: Mapping[str, str] | None = None):
    """Predict each phase-two covariate from phase-one predictors.

    Each target is regressed on its predictors in the phase-two sample with
    ``weights`` (linear, logistic or multinomial regression with intercept),
    and predictions are returned for every cohort member.

    Returns
    -------
    models : dict of str -> PredictionModel
    predicted : dict of str -> ndarray
    """
    weights = np.asarray(weights, dtype=float)
    kinds = dict(kinds or {})
    models, predicted = {}, {}
    for target, names in predictors.items():
        names = tuple(names)
        Z = cohort.matrix(names)
        if np.isnan(Z).any():
            raise InvariantViolation(None, f"predictors of {target!r} must be complete on the cohort")
        y_all = cohort.covariates[target]
        use = (weights > 0) & ~np.isnan(y_all)
        y, w = y_all[use], weights[use]
        design = np.column_stack([np.ones(use.sum()), Z[use]])
        kind = kinds.get(target) or infer_kind(y)
        levels = None
        if kind == LINEAR:
            coef = _fit_linear(design, y, w, target)
        elif kind == LOGISTIC:
            coef = _fit_logistic(design, y, w, target)
        elif kind == MULTINOMIAL:
            levels = np.unique(y)
            coef = _fit_multinomial(design, y, w, target, levels)
        else:
            raise ValueError(f"unknown prediction kind {kind!r}")
        model = PredictionModel(target, kind, names, coef, levels)
        models[target] = model
        predicted[target] = model.predict(Z)
    return models, predicted


# --- auxiliary variables -------------------------------------------------


@dataclass
class AuxiliaryMatrix:
    values: np.ndarray
    method: str
    includes_constant: bool
    names: tuple[str, ...] = ()

    @property
    def q(self) -> int:
        return self.values.shape[1]


def _proxy_matrix(cohort: CohortTable, phase1, phase2, predicted):
    cols = [cohort.covariates[c] for c in phase1] + [np.asarray(predicted[c], dtype=float) for c in phase2]
    return np.column_stack(cols)


def build_aux_breslow(cohort: CohortTable, predicted: Mapping[str, np.ndarray],
                      phase1: Sequence[str], phase2: Sequence[str]) -> AuxiliaryMatrix:
    """Constant plus influences of the whole-cohort fit with predicted
    phase-two covariates."""
    X = _proxy_matrix(cohort, phase1, phase2, predicted)
    fit = fit_cox_arrays(cohort.entry, cohort.exit, cohort.status, X, np.ones(len(cohort)))
    infl = influence_beta(fit).matrix
    names = ("const",) + tuple(f"infl.{c}" for c in list(phase1) + list(phase2))
    return AuxiliaryMatrix(np.column_stack([np.ones(len(cohort)), infl]), BRESLOW, True, names)


def follow_up_in(entry, exit, tau1, tau2) -> np.ndarray:
    """Length of ``(entry, exit]`` that falls in ``(tau1, tau2]``."""
    return np.maximum(0.0, np.minimum(exit, tau2) - np.maximum(entry, tau1))


def build_aux_shin(cohort: CohortTable, weights, predicted: Mapping[str, np.ndarray],
                   phase1: Sequence[str], phase2: Sequence[str], tau1: float, tau2: float,
                   sample=None, fixed=None) -> AuxiliaryMatrix:
    """Breslow auxiliaries plus one pure-risk auxiliary.

    The design weights are first calibrated on the Breslow auxiliaries; the
    Cox model with the true covariates is fitted on the phase-two sample
    with those weights; the pure-risk auxiliary is follow-up time in
    ``(tau1, tau2]`` times the relative hazard of that fit evaluated at the
    phase-one covariates and predicted phase-two covariates.
    """
    weights = np.asarray(weights, dtype=float)
    base = build_aux_breslow(cohort, predicted, phase1, phase2)
    intermediate = calibrate_weights(weights, base, sample=sample, fixed=fixed)
    covariates = list(phase1) + list(phase2)
    fit = fit_cox_arrays(cohort.entry, cohort.exit, cohort.status, cohort.matrix(covariates), intermediate.weights)
    proxy = _proxy_matrix(cohort, phase1, phase2, predicted)
    pr = follow_up_in(cohort.entry, cohort.exit, tau1, tau2) * np.exp(proxy @ fit.beta)
    return AuxiliaryMatrix(np.column_stack([base.values, pr]), SHIN, True, base.names + ("pure.risk",))


# --- raking ----------------------------------------------------------------


@dataclass
class CalibratedWeights:
    weights: np.ndarray
    eta: np.ndarray
    residual: float
    iterations: int


def constraint_residual(weights, A: np.ndarray, sample) -> np.ndarray:
    """Per-column ``|sum_sample w A - sum_cohort A| / sum_cohort |A|``."""
    scale = np.abs(A).sum(axis=0)
    scale[scale == 0] = 1.0
    gap = weights[sample] @ A[sample] - A.sum(axis=0)
    return np.abs(gap) / scale


def calibrate_weights(weights, aux, sample=None, tol: float = RAKE_TOL,
                      max_iter: int = RAKE_MAX_ITER, fixed=None) -> CalibratedWeights:
    """Raking: ``w*_i = w_i exp(eta'A_i)`` with ``sum_sample w* A = sum_cohort A``.

    ``eta`` is found by damped Newton on the convex dual
    ``F(eta) = sum_free w exp(eta'A) - eta' (sum_cohort A - sum_fixed w A)``.
    Sample members flagged in ``fixed`` keep their weight but still count in
    the totals. Columns are rescaled internally; the returned ``eta`` is on
    the original scale.
    """
    w = np.asarray(weights, dtype=float)
    A = np.asarray(getattr(aux, "values", aux), dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    sample = (w > 0) if sample is None else np.asarray(sample, dtype=bool)
    if not np.all(np.isfinite(A)):
        raise InvariantViolation(None, "auxiliary variables must be finite for every cohort member")
    scale = np.sqrt(np.mean(A * A, axis=0))
    scale[scale == 0] = 1.0
    As = A / scale
    free = sample if fixed is None else sample & ~np.asarray(fixed, dtype=bool)
    ws, Xs = w[free], As[free]
    target = As.sum(axis=0) - w[sample & ~free] @ As[sample & ~free]
    gram = (Xs * ws[:, None]).T @ Xs
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise CalibrationSingular("weighted Gram matrix of auxiliary variables is singular")

    def dual(eta):
        return float(ws @ np.exp(Xs @ eta) - eta @ target)

    eta = np.zeros(As.shape[1])
    tight = 1e-3 * tol
    resid = float(np.max(constraint_residual(w, A, sample)))
    it = 0
    if resid > tight:
        value = dual(eta)
        while it < max_iter:
            it += 1
            u = ws * np.exp(Xs @ eta)
            grad = Xs.T @ u - target
            hess = (Xs * u[:, None]).T @ Xs
            try:
                step = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                raise CalibrationSingular("raking Hessian is singular") from None
            t = 1.0
            with np.errstate(over="ignore"):
                new_value = dual(eta + step)
                while not (np.isfinite(new_value) and new_value <= value + 1e-4 * t * (grad @ step)) and t > 1e-10:
                    t /= 2
                    new_value = dual(eta + t * step)
            eta, value = eta + t * step, new_value
            current = w.copy()
            current[free] = ws * np.exp(Xs @ eta)
            resid = float(np.max(constraint_residual(current, A, sample)))
            if resid <= tight or np.max(np.abs(t * step)) < 1e-14:
                break
        if resid > tol:
            raise CalibrationNonConvergence(resid)
    out = w.copy()
    if it:
        out[free] = ws * np.exp(Xs @ eta)
    return CalibratedWeights(out, eta / scale, resid, it)


# --- variance --------------------------------------------------------------


def calibrated_influences(infl, aux, calibrated_weights, sample=None, fixed=None):
    """Split weighted influences into a phase-one part and phase-two residuals.

    Returns ``(g, r)``: ``g = A B`` for every cohort member, where ``B`` is the
    weighted regression of the unweighted influences on the auxiliaries over
    the raked (non-``fixed``) sample members, and ``r = D - w* g`` on the
    sample (zero elsewhere).
    """
    D = np.asarray(getattr(infl, "matrix", infl), dtype=float)
    if D.ndim == 1:
        D = D[:, None]
    A = np.asarray(getattr(aux, "values", aux), dtype=float)
    ws = np.asarray(calibrated_weights, dtype=float)
    sample = (ws > 0) if sample is None else np.asarray(sample, dtype=bool)
    free = sample if fixed is None else sample & ~np.asarray(fixed, dtype=bool)
    As = A[free]
    gram = (As * ws[free, None]).T @ As
    try:
        B = np.linalg.solve(gram, As.T @ D[free])
    except np.linalg.LinAlgError:
        raise CalibrationSingular("Gram matrix of auxiliary variables is singular") from None
    g = A @ B
    r = np.where(sample[:, None], D - ws[:, None] * g, 0.0)
    return g, r


def variance_calibrated(infl, aux, calibrated_weights, design: SamplingDesign, sample=None, fixed=None):
    """Variance of an estimator computed with calibrated weights.

    Returns ``(V, V_robust)``. ``V`` is the phase-one variance of the total
    per-subject influence ``g_i + r_i/w*_i`` (Horvitz-Thompson estimated on the
    sample) plus the stratified SRSWOR term applied to the residuals ``r``.
    ``V_robust`` sums outer products of the total influences ``g_i + r_i``.
    """
    ws = np.asarray(calibrated_weights, dtype=float)
    sample = (ws > 0) if sample is None else np.asarray(sample, dtype=bool)
    g, r = calibrated_influences(infl, aux, ws, sample, fixed)
    n = design.n
    cross = g[sample].T @ r[sample]
    phase1 = g.T @ g + cross + cross.T + r[sample].T @ (r[sample] / ws[sample, None])
    V = n / (n - 1) * phase1 + sampling_term(r, design, np.where(sample, ws, 0.0))
    total = g + r
    return V, total.T @ total
