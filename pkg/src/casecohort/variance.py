"""Robust and finite-population variance estimators from influences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import SamplingDesign
from .errors import MRequiresAtLeastTwo, NegativeVarianceDiagonal

DESIGN = "design-weights"
CALIBRATED = "calibrated"
PHASE3_DESIGN = "phase3-design"
PHASE3_ESTIMATED = "phase3-estimated"
COHORT = "cohort"


@dataclass(frozen=True)
class PairCoefficients:
    """SRSWOR coefficients of one stratum with ``n`` members and ``m`` sampled.

    ``w_pair`` is the inverse joint inclusion probability,
    ``sigma_offdiag`` the covariance of two distinct inclusion indicators and
    ``sigma_diag`` the variance of one.
    """

    n: int
    m: int

    @property
    def w_pair(self) -> float:
        return self.n / self.m * (self.n - 1) / (self.m - 1)

    @property
    def w_single(self) -> float:
        return self.n / self.m

    @property
    def sigma_offdiag(self) -> float:
        f = self.m / self.n
        return f * (self.m - 1) / (self.n - 1) - f * f

    @property
    def sigma_diag(self) -> float:
        f = self.m / self.n
        return f * (1 - f)


def _as_matrix(infl) -> np.ndarray:
    M = getattr(infl, "matrix", infl)
    M = np.asarray(M, dtype=float)
    return M[:, None] if M.ndim == 1 else M


def variance_robust(infl) -> np.ndarray:
    """Sum of outer products of the influence rows."""
    D = _as_matrix(infl)
    return D.T @ D


def phase_one_term(D: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    """``n/(n-1) * sum_i D_i D_i' / w_i`` over subjects with positive weight."""
    keep = weights > 0
    Dk = D[keep]
    return n / (n - 1) * (Dk.T @ (Dk / weights[keep, None]))


def sampling_term(D: np.ndarray, design: SamplingDesign, weights: np.ndarray,
                  retention: np.ndarray | None = None, naive: bool = False) -> np.ndarray:
    """Phase-two SRSWOR term over pairs of sampled non-cases within strata.

    Off-diagonal pairs use ``w_pair * sigma_offdiag``; a subject paired with
    itself uses ``(n_j/m_j) * sigma_diag / w3_i`` where ``w3_i`` is its
    phase-three weight (1 without a third phase). Pairs involving a case
    contribute nothing.
    """
    d = D.shape[1]
    out = np.zeros((d, d))
    eligible = design.sampled_noncase & (weights > 0)
    summary = design.summary
    for j in range(len(summary.labels)):
        members = np.flatnonzero(eligible & (design.stratum == j))
        if len(members) == 0:
            continue
        nj, mj = int(summary.n[j]), int(summary.m[j])
        if mj == nj:
            continue
        if mj < 2:
            raise MRequiresAtLeastTwo(
                f"stratum {summary.labels[j]!r} has m=1 with sampled non-cases; pair weight undefined"
            )
        coef = PairCoefficients(nj, mj)
        Dj = D[members]
        diag = coef.w_single * coef.sigma_diag * np.ones(len(members))
        if retention is not None:
            diag = diag / retention[members]
        if naive:
            for a in range(len(members)):
                for b in range(len(members)):
                    c = diag[a] if a == b else coef.w_pair * coef.sigma_offdiag
                    out += c * np.outer(Dj[a], Dj[b])
            continue
        total = Dj.sum(axis=0)
        squares = Dj.T @ Dj
        out += coef.w_pair * coef.sigma_offdiag * (np.outer(total, total) - squares)
        out += Dj.T @ (Dj * diag[:, None])
    return out


def variance_finite_population(infl, design: SamplingDesign, weights, retention=None,
                               naive: bool = False) -> np.ndarray:
    """Phase-one term plus the stratified SRSWOR sampling term.

    Parameters
    ----------
    infl : InfluenceSet or ndarray
        Weighted influences, zero outside the analysed sample.
    design : SamplingDesign
        Strata codes, counts and case status.
    weights : ndarray
        Analysis weights (overall weights when a third phase is present).
    retention : ndarray, optional
        Phase-three weights ``w3``; scales the diagonal of the sampling term.
    naive : bool
        Evaluate the sampling term by an explicit double loop (test oracle).
    """
    D = _as_matrix(infl)
    weights = np.asarray(weights, dtype=float)
    return phase_one_term(D, weights, design.n) + sampling_term(D, design, weights, retention, naive)


@dataclass
class VarianceReport:
    estimand: str
    V: np.ndarray | None
    V_robust: np.ndarray
    label: str = DESIGN

    def diag(self):
        v = None if self.V is None else np.diag(self.V).copy()
        return v, np.diag(self.V_robust).copy()


def _symmetrize_checked(M: np.ndarray, what: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    S = 0.5 * (M + M.T)
    scale = float(np.max(np.abs(S))) if S.size else 0.0
    if np.any(np.diag(S) < -1e-12 * scale):
        raise NegativeVarianceDiagonal(f"{what} has a negative diagonal entry {np.min(np.diag(S)):.3g}")
    return S


def assemble_report(estimand: str, V, V_robust, label: str = DESIGN) -> VarianceReport:
    """Symmetrize both matrices and refuse negative variances."""
    V = None if V is None else _symmetrize_checked(V, "V")
    return VarianceReport(estimand, V, _symmetrize_checked(V_robust, "V_robust"), label)
