"""Phase-three (missing at random) weights and variance.

Phase-two members with complete covariate data form the phase-three
sample. Retention is treated as independent Bernoulli sampling within
phase-three strata for the variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data_model import SamplingDesign
from .errors import EmptyPhase3Stratum, InvariantViolation
from .variance import PHASE3_DESIGN, PHASE3_ESTIMATED, variance_finite_population, variance_robust

DESIGN = "design"
ESTIMATED = "estimated"
BOTH = "both"
MODES = (DESIGN, ESTIMATED, BOTH)


@dataclass(frozen=True)
class Phase3Spec:
    """Phase-three strata (per subject), variance mode and optional known weights."""

    stratum3: np.ndarray
    mode: str = BOTH
    provided: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvariantViolation(None, f"weights.phase3.type must be one of {MODES}, got {self.mode!r}")

    @property
    def variants(self) -> tuple[str, ...]:
        return (ESTIMATED, DESIGN) if self.mode == BOTH else (self.mode,)


def estimate_phase3_weights(in_phase2, in_phase3, stratum3, provided=None) -> np.ndarray:
    """Phase-three weights for phase-three members, zero elsewhere.

    Known weights in ``provided`` pass through. Otherwise each stratum's
    weight is (#phase-two in stratum) / (#phase-three in stratum).
    """
    in_phase2 = np.asarray(in_phase2, dtype=bool)
    in_phase3 = np.asarray(in_phase3, dtype=bool)
    w3 = np.zeros(len(in_phase3))
    if provided is not None:
        provided = np.asarray(provided, dtype=float)
        bad = in_phase3 & ~(provided > 0)
        if bad.any():
            raise InvariantViolation(int(np.argmax(bad)) + 1, "phase-three weight must be > 0")
        w3[in_phase3] = provided[in_phase3]
        return w3
    stratum3 = np.asarray(stratum3, dtype=object)
    for s in sorted(set(stratum3[in_phase2].tolist()), key=str):
        members2 = in_phase2 & (stratum3 == s)
        members3 = in_phase3 & (stratum3 == s)
        n3 = int(members3.sum())
        if n3 == 0:
            raise EmptyPhase3Stratum(s)
        w3[members3] = members2.sum() / n3
    return w3


def weights_from_probabilities(in_phase3, stratum3, probabilities: Mapping[str, float]) -> np.ndarray:
    """Known phase-three weights ``1/pi3`` from per-stratum retention probabilities."""
    in_phase3 = np.asarray(in_phase3, dtype=bool)
    w3 = np.zeros(len(in_phase3))
    for s, p in probabilities.items():
        if not 0 < p <= 1:
            raise InvariantViolation(None, f"retention probability for {s!r} must be in (0, 1]")
        w3[in_phase3 & (np.asarray(stratum3, dtype=object) == str(s))] = 1.0 / p
    return w3


def overall_weights(w2, w3, in_phase3) -> np.ndarray:
    """Elementwise ``w2 * w3`` for phase-three members, zero otherwise."""
    in_phase3 = np.asarray(in_phase3, dtype=bool)
    return np.where(in_phase3, np.asarray(w2, dtype=float) * np.asarray(w3, dtype=float), 0.0)


def retention_term(D: np.ndarray, w3: np.ndarray, in_phase3, stratum3=None, centered: bool = False) -> np.ndarray:
    """Bernoulli retention variance ``sum (1 - 1/w3) D D'`` over phase-three members.

    With ``centered=True`` influences are first centered within each
    phase-three stratum, which is the linearization of post-stratified
    (estimated) weights.
    """
    keep = np.flatnonzero(np.asarray(in_phase3, dtype=bool))
    Dk = D[keep].copy()
    factor = 1.0 - 1.0 / w3[keep]
    if centered:
        strata = np.asarray(stratum3, dtype=object)[keep]
        for s in set(strata.tolist()):
            rows = strata == s
            Dk[rows] -= Dk[rows].mean(axis=0)
    return Dk.T @ (Dk * factor[:, None])


def variance_phase3(infl, design: SamplingDesign, w2, w3, in_phase3, stratum3, mode: str = BOTH):
    """Variance reports for a three-phase analysis.

    Returns a dict ``{"design": (V, V_robust), "estimated": (V, V_robust)}``
    restricted to the requested ``mode``. Both variants share the phase-one
    and phase-two terms, with the phase-two diagonal scaled by ``1/w3``; they
    differ in the retention term (raw vs stratum-centered influences).
    """
    D = np.asarray(getattr(infl, "matrix", infl), dtype=float)
    if D.ndim == 1:
        D = D[:, None]
    w3 = np.asarray(w3, dtype=float)
    weights = overall_weights(w2, w3, in_phase3)
    retention = np.where(weights > 0, w3, 1.0)
    base = variance_finite_population(D, design, weights, retention=retention)
    robust = variance_robust(D)
    out = {}
    variants = (ESTIMATED, DESIGN) if mode == BOTH else (mode,)
    for variant in variants:
        extra = retention_term(D, w3, in_phase3, stratum3, centered=variant == ESTIMATED)
        out[variant] = (base + extra, robust)
    return out


LABELS = {DESIGN: PHASE3_DESIGN, ESTIMATED: PHASE3_ESTIMATED}
