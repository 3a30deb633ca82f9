"""End-to-end analysis of cohort or case-cohort data.

:func:`analyze_cohort` dispatches to one of the supported analyses:
whole cohort, design weights (stratified or not), calibrated weights, or a
third phase of sampling with design and/or estimated phase-three weights.
Variances of ``(beta, Lambda0)`` are computed jointly, so the pure risk
variance of any profile is a quadratic form in the joint matrix; this is
what lets :func:`estimate_pure_risk` answer new profiles without refitting.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import calibration as cal
from .cox import BaselineHazard, CoxFit, baseline_hazard, cumulative_hazard, fit_cox, pure_risk_value
from .data_model import CohortTable, SamplingDesign, resolve_weights, strata_summary
from .errors import InvariantViolation, StaleArtifact, ValidationError
from .influence import influence_beta, influence_lambda0, pure_risk_gradient
from .multiphase import BOTH, LABELS as PHASE3_LABELS, estimate_phase3_weights, variance_phase3
from .variance import (
    CALIBRATED,
    COHORT,
    DESIGN,
    VarianceReport,
    assemble_report,
    variance_finite_population,
    variance_robust,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NO_VARIANT = ""


@dataclass
class CaseCohortResult:
    """Estimates and joint variance reports for one analysis.

    ``reports`` maps a variant (``""`` without a third phase, otherwise
    ``"design"``/``"estimated"``) to a report on the joint vector
    ``(beta, Lambda0)``.
    """

    covariates: tuple[str, ...]
    beta: np.ndarray
    Lambda0: float
    tau1: float
    tau2: float
    reports: dict[str, VarianceReport]
    analysis: str
    phase3: bool = False
    profiles: list[dict] = field(default_factory=list)
    influences: np.ndarray | None = None
    weights: np.ndarray | None = None
    fit: CoxFit | None = field(default=None, repr=False)
    hazard: BaselineHazard | None = field(default=None, repr=False)
    info: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.beta)

    def pure_risk_table(self, profiles=None, variant: str | None = None):
        profiles = self.profiles if profiles is None else profiles
        variant = self.default_variant if variant is None else variant
        return pure_risk_rows(self.beta, self.Lambda0, self.reports[variant], self.covariates, profiles)

    @property
    def default_variant(self) -> str:
        return next(iter(self.reports))

    def variances(self, variant: str | None = None):
        """``(V, V_robust)`` diagonals for ``beta`` and ``Lambda0``."""
        report = self.reports[self.default_variant if variant is None else variant]
        V, Vr = report.diag()
        return V, Vr

    def to_dict(self) -> dict:
        """Output mapping with the documented key names (see README)."""
        names = list(self.covariates)
        out = {"beta": dict(zip(names, map(float, self.beta)))}

        def add(suffix, report):
            V, Vr = report.diag()
            p = self.p
            out["beta.var" + suffix] = dict(zip(names, [None] * p if V is None else map(float, V[:p])))
            out["beta.robustvar" + suffix] = dict(zip(names, map(float, Vr[:p])))

        def add_lambda(suffix, report):
            V, Vr = report.diag()
            out["Lambda0.var" + suffix] = None if V is None else float(V[-1])
            out["Lambda0.robustvar" + suffix] = float(Vr[-1])

        suffixes = {v: ("" if v == NO_VARIANT else "." + v) for v in self.reports}
        for v, report in self.reports.items():
            add(suffixes[v], report)
        out["Lambda0"] = float(self.Lambda0)
        for v, report in self.reports.items():
            add_lambda(suffixes[v], report)
        if self.profiles:
            for v in self.reports:
                rows = self.pure_risk_table(variant=v)
                out["Pi.var" + suffixes[v]] = [
                    {"risk": r, "variance": var, "robust.variance": rvar} for r, var, rvar in rows
                ]
        return out


def pure_risk_rows(beta, cumhaz, report: VarianceReport, covariates: Sequence[str], profiles):
    """``(risk, V, V_robust)`` for each profile, by the delta method on the
    joint ``(beta, Lambda0)`` variance."""
    rows = []
    for prof in profiles:
        x = profile_vector(prof, covariates)
        g = pure_risk_gradient(beta, x, cumhaz)
        risk = pure_risk_value(beta, x, cumhaz)
        var = None if report.V is None else float(g @ report.V @ g)
        rows.append((risk, var, float(g @ report.V_robust @ g)))
    return rows


def profile_vector(profile, covariates: Sequence[str]) -> np.ndarray:
    if isinstance(profile, Mapping):
        missing = [c for c in covariates if c not in profile]
        if missing:
            raise InvariantViolation(None, f"profile lacks covariates {missing}")
        return np.array([float(profile[c]) for c in covariates])
    x = np.asarray(profile, dtype=float)
    if x.shape != (len(covariates),):
        raise InvariantViolation(None, f"profile must have {len(covariates)} values")
    return x


def default_taus(cohort: CohortTable, tau1=None, tau2=None):
    """First and last event times unless given."""
    events = cohort.exit[cohort.status == 1]
    if len(events) == 0:
        raise InvariantViolation(None, "cohort has no events")
    tau1 = float(events.min()) if tau1 is None else float(tau1)
    tau2 = float(events.max()) if tau2 is None else float(tau2)
    if not tau1 < tau2:
        raise InvariantViolation(None, f"Tau1={tau1} must be < Tau2={tau2}")
    return tau1, tau2


def _resolve_predictors(predictors, phase2):
    if predictors is None:
        return None
    if isinstance(predictors, Mapping):
        unknown = sorted(set(predictors) - set(phase2))
        if unknown:
            raise ValidationError(f"predictors given for non phase-two covariates {unknown}")
        return {k: list(v) for k, v in predictors.items()}
    return {c: list(predictors) for c in phase2}


def build_auxiliary(cohort, w2, sample, phase1, phase2, *, fixed=None, predict=True, predicted_cox_phase2=None,
                    predictors_cox_phase2=None, aux_vars=None, aux_method=cal.SHIN, tau1=None, tau2=None):
    """Auxiliary variables with the documented precedence: ``aux_vars``, then
    ``predicted_cox_phase2``, then prediction from ``predictors_cox_phase2``."""
    if aux_vars:
        A = cohort.matrix(list(aux_vars))
        if np.isnan(A).any():
            raise InvariantViolation(None, "aux.vars must be complete on the cohort")
        return cal.AuxiliaryMatrix(A, cal.USER, False, tuple(aux_vars)), {}
    info = {}
    if predicted_cox_phase2:
        predicted = {}
        for c in phase2:
            if c not in predicted_cox_phase2:
                raise ValidationError(f"predicted.cox.phase2 lacks {c!r}")
            predicted[c] = cohort.covariates[predicted_cox_phase2[c]]
    elif not phase2:
        predicted = {}
    else:
        predictors = _resolve_predictors(predictors_cox_phase2, phase2)
        if not predict or not predictors:
            raise ValidationError(
                "calibration needs aux.vars, predicted.cox.phase2, or predict with predictors.cox.phase2"
            )
        missing = [c for c in phase2 if c not in predictors]
        if missing:
            raise ValidationError(f"no predictors given for phase-two covariates {missing}")
        models, predicted = cal.predict_phase2(cohort, w2, predictors)
        info["prediction"] = {k: m.kind for k, m in models.items()}
    if aux_method == cal.BRESLOW:
        aux = cal.build_aux_breslow(cohort, predicted, phase1, phase2)
    elif aux_method == cal.SHIN:
        aux = cal.build_aux_shin(cohort, w2, predicted, phase1, phase2, tau1, tau2, sample=sample, fixed=fixed)
    else:
        raise ValidationError(f"aux.method must be 'Breslow' or 'Shin', got {aux_method!r}")
    return aux, info


def analyze_cohort(
    cohort: CohortTable,
    cox_phase1: Sequence[str],
    cox_phase2: Sequence[str] = (),
    *,
    calibrated: bool = False,
    predict: bool = True,
    predicted_cox_phase2: Mapping[str, str] | None = None,
    predictors_cox_phase2=None,
    aux_vars: Sequence[str] | None = None,
    aux_method: str = cal.SHIN,
    tau1: float | None = None,
    tau2: float | None = None,
    profiles: Sequence | None = None,
    subcohort_strata_counts: Mapping[str, int] | None = None,
    weights_phase3_type: str = BOTH,
    keep_influences: bool = True,
    calibrate_cases: bool = False,
    cox_options: Mapping | None = None,
) -> CaseCohortResult:
    """Estimate log relative hazards, cumulative baseline hazard on
    ``(tau1, tau2]`` and pure risks, with both variance estimates.

    The analysis follows from the data and flags: no subcohort column means
    a whole-cohort analysis; a phase-three column adds a third phase; and
    ``calibrated`` rakes the design weights. Raking adjusts the weights of
    sampled non-cases only; cases keep weight 1 (they are sampled with
    certainty) unless ``calibrate_cases`` is set.
    """
    phase1, phase2 = list(cox_phase1), list(cox_phase2)
    covariates = phase1 + phase2
    if len(set(covariates)) != len(covariates):
        raise ValidationError("a covariate is listed twice in cox.phase1/cox.phase2")
    cox_options = dict(cox_options or {})
    tau1, tau2 = default_taus(cohort, tau1, tau2)
    profiles = list(profiles or [])
    for prof in profiles:
        profile_vector(prof, covariates)
    has_phase3 = cohort.in_phase3 is not None
    if has_phase3 and calibrated:
        raise ValidationError("phase3 cannot be combined with calibrated=TRUE")
    if cohort.is_whole_cohort and not has_phase3 and calibrated:
        log.warning("calibrated=TRUE ignored for a whole-cohort analysis")
        calibrated = False

    summary = strata_summary(cohort, subcohort_strata_counts)
    design = SamplingDesign.from_cohort(cohort, summary)
    w2 = resolve_weights(cohort, summary)
    sample = cohort.in_phase2
    info = {}

    if has_phase3:
        if cohort.stratum3 is None:
            stratum3 = np.full(len(cohort), "all", dtype=object)
        else:
            stratum3 = cohort.stratum3
        w3 = estimate_phase3_weights(sample, cohort.in_phase3, stratum3, cohort.weight3)
        weights = np.where(cohort.in_phase3, w2 * w3, 0.0)
        analysis = "phase3"
    elif cohort.is_whole_cohort:
        weights = np.ones(len(cohort))
        analysis = COHORT
    elif calibrated:
        fixed = None if calibrate_cases else cohort.status == 1
        aux, info = build_auxiliary(
            cohort, w2, sample, phase1, phase2, fixed=fixed, predict=predict,
            predicted_cox_phase2=predicted_cox_phase2, predictors_cox_phase2=predictors_cox_phase2,
            aux_vars=aux_vars, aux_method=aux_method, tau1=tau1, tau2=tau2,
        )
        calib = cal.calibrate_weights(w2, aux, sample=sample, fixed=fixed)
        weights = calib.weights
        info.update(aux_method=aux.method, calibration_residual=calib.residual,
                    calibration_iterations=calib.iterations)
        analysis = CALIBRATED
    else:
        weights = w2
        analysis = DESIGN

    fit = fit_cox(cohort, weights, covariates, **cox_options)
    hz = baseline_hazard(fit)
    cumhaz = cumulative_hazard(hz, tau1, tau2)
    ib = influence_beta(fit)
    il = influence_lambda0(fit, hz, ib, tau1, tau2)
    D = np.column_stack([ib.matrix, il.matrix])

    reports = {}
    if analysis == COHORT:
        reports[NO_VARIANT] = assemble_report("beta+Lambda0", None, variance_robust(D), COHORT)
    elif analysis == DESIGN:
        reports[NO_VARIANT] = assemble_report(
            "beta+Lambda0", variance_finite_population(D, design, weights), variance_robust(D), DESIGN
        )
    elif analysis == CALIBRATED:
        V, Vr = cal.variance_calibrated(D, aux, weights, design, sample=sample, fixed=fixed)
        reports[NO_VARIANT] = assemble_report("beta+Lambda0", V, Vr, CALIBRATED)
    else:
        parts = variance_phase3(D, design, w2, w3, cohort.in_phase3, stratum3, weights_phase3_type)
        for variant, (V, Vr) in parts.items():
            reports[variant] = assemble_report("beta+Lambda0", V, Vr, PHASE3_LABELS[variant])

    return CaseCohortResult(
        covariates=tuple(covariates), beta=fit.beta.copy(), Lambda0=cumhaz, tau1=tau1, tau2=tau2,
        reports=reports, analysis=analysis, phase3=has_phase3, profiles=profiles,
        influences=D if keep_influences else None, weights=weights, fit=fit, hazard=hz, info=info,
    )


# --- fit bundle --------------------------------------------------------------


def save_fit(result: CaseCohortResult, path) -> None:
    """Write a single-file bundle: JSON metadata plus binary matrix blocks."""
    meta = {
        "schema_version": SCHEMA_VERSION,
        "covariates": list(result.covariates),
        "Lambda0": result.Lambda0,
        "tau1": result.tau1,
        "tau2": result.tau2,
        "analysis": result.analysis,
        "phase3": result.phase3,
        "variants": list(result.reports),
        "labels": [r.label for r in result.reports.values()],
        "has_V": [r.V is not None for r in result.reports.values()],
    }
    arrays = {"beta": result.beta}
    for i, report in enumerate(result.reports.values()):
        if report.V is not None:
            arrays[f"V_{i}"] = report.V
        arrays[f"Vrobust_{i}"] = report.V_robust
    if result.influences is not None:
        arrays["influences"] = result.influences
    arrays["metadata"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_fit(path) -> CaseCohortResult:
    """Read a bundle written by :func:`save_fit`."""
    try:
        with np.load(path, allow_pickle=False) as bundle:
            meta = json.loads(bytes(bundle["metadata"]).decode())
            arrays = {k: bundle[k] for k in bundle.files}
    except (OSError, ValueError, KeyError) as exc:
        raise StaleArtifact(f"{path}: not a fit bundle ({exc})") from None
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise StaleArtifact(
            f"{path}: bundle schema version {meta.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )
    reports = {}
    for i, (variant, label, has_V) in enumerate(zip(meta["variants"], meta["labels"], meta["has_V"])):
        V = arrays[f"V_{i}"] if has_V else None
        reports[variant] = VarianceReport("beta+Lambda0", V, arrays[f"Vrobust_{i}"], label)
    return CaseCohortResult(
        covariates=tuple(meta["covariates"]), beta=arrays["beta"], Lambda0=meta["Lambda0"],
        tau1=meta["tau1"], tau2=meta["tau2"], reports=reports, analysis=meta["analysis"],
        phase3=meta["phase3"], influences=arrays.get("influences"),
    )


def estimate_pure_risk(result: CaseCohortResult, profiles) -> dict:
    """Pure risk table(s) for new profiles from a fitted result, keyed like
    the ``Pi.var`` entries of :meth:`CaseCohortResult.to_dict`."""
    out = {}
    for variant in result.reports:
        key = "Pi.var" + ("" if variant == NO_VARIANT else "." + variant)
        rows = result.pure_risk_table(profiles, variant)
        out[key] = [{"risk": r, "variance": v, "robust.variance": rv} for r, v, rv in rows]
    return out
