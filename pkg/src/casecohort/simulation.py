"""Synthetic cohorts, subcohort sampling and Monte Carlo experiments.

Replicate ``r`` of an experiment with seed ``s`` draws from
``SeedSequence(s, spawn_key=(r,))``, split into three child streams used for
the cohort, the subcohort draw and phase-three retention. The cohort stream
depends only on the cohort part of the configuration, so configurations
that differ only in their sampling design see the same cohorts (common
random numbers), and serial and parallel runs agree.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .analysis import NO_VARIANT, analyze_cohort
from .data_model import UNSTRATIFIED, CohortTable, TimeScale
from .errors import CaseCohortError, ConfigError, MTooLarge, TooManyReplicateFailures

THREADS_ENV = "CASECOHORT_THREADS"
MAX_FAILURE_FRACTION = 0.02
Z95 = 1.959963984540054


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseHazard:
    """Piecewise-constant hazard: ``rates[k]`` on ``[breaks[k], breaks[k+1])``."""

    breaks: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.breaks) != len(self.rates) or not self.breaks:
            raise ConfigError("baseline hazard needs one rate per break")
        if self.breaks[0] != 0 or any(b >= c for b, c in zip(self.breaks, self.breaks[1:])):
            raise ConfigError("hazard breaks must start at 0 and increase")
        if any(r < 0 for r in self.rates):
            raise ConfigError("hazard rates must be non-negative")

    def _knots(self):
        b = np.asarray(self.breaks, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        H = np.concatenate([[0.0], np.cumsum(r[:-1] * np.diff(b))])
        return b, r, H

    def cumulative(self, t):
        b, r, H = self._knots()
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(b, t, side="right") - 1
        return H[k] + r[k] * (t - b[k])

    def inverse(self, h):
        """Smallest ``t`` with ``cumulative(t) = h`` (``inf`` past the last knot
        when the final rate is 0)."""
        b, r, H = self._knots()
        h = np.asarray(h, dtype=float)
        k = np.searchsorted(H, h, side="right") - 1
        with np.errstate(divide="ignore", invalid="ignore"):
            t = b[k] + (h - H[k]) / r[k]
        return np.where(r[k] > 0, t, np.inf)


def _covariate_spec(name, spec):
    kind = spec.get("dist")
    if kind not in ("bernoulli", "normal", "proxy", "uniform"):
        raise ConfigError(f"covariate {name!r}: unknown dist {kind!r}")
    if kind == "bernoulli" and not 0 < spec.get("p", -1) <= 1:
        raise ConfigError(f"covariate {name!r}: p must be in (0, 1]")
    return dict(spec)


@dataclass(frozen=True)
class SimConfig:
    """Data-generating model, sampling design and experiment size.

    Read from JSON by :meth:`from_dict`; see README for the key list.
    """

    n: int
    beta: Mapping[str, float]
    covariates: Mapping[str, Mapping]
    phase2: tuple[str, ...] = ()
    hazard: PiecewiseHazard = PiecewiseHazard((0.0,), (0.01,))
    entry: tuple[float, float] | None = None
    censoring_rate: float = 0.0
    horizon: float | None = None
    strata: Mapping | None = None
    m: Mapping[str, int] | int | None = None
    phase3: Mapping | None = None
    replicates: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        known = {
            "n", "beta", "covariates", "phase2", "baseline", "entry", "censoring_rate", "horizon",
            "strata", "m", "phase3", "replicates", "seed", "analysis",
        }
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        for key in ("n", "beta", "covariates"):
            if key not in d:
                raise ConfigError(f"config lacks {key!r}")
        baseline = d.get("baseline", {"rate": 0.01})
        if "rate" in baseline:
            hazard = PiecewiseHazard((0.0,), (float(baseline["rate"]),))
        else:
            hazard = PiecewiseHazard(tuple(map(float, baseline["breaks"])), tuple(map(float, baseline["rates"])))
        covs = {k: _covariate_spec(k, v) for k, v in d["covariates"].items()}
        missing = sorted(set(d["beta"]) - set(covs))
        if missing:
            raise ConfigError(f"beta names unknown covariates {missing}")
        entry = d.get("entry")
        if entry is not None:
            entry = (float(entry[0]), float(entry[1]))
        cfg = cls(
            n=int(d["n"]), beta=dict(d["beta"]), covariates=covs, phase2=tuple(d.get("phase2", ())),
            hazard=hazard, entry=entry, censoring_rate=float(d.get("censoring_rate", 0.0)),
            horizon=None if d.get("horizon") is None else float(d["horizon"]),
            strata=d.get("strata"), m=d.get("m"), phase3=d.get("phase3"),
            replicates=int(d.get("replicates", 100)), seed=int(d.get("seed", 0)),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if self.censoring_rate < 0:
            raise ConfigError("censoring_rate must be >= 0")
        if self.horizon is not None and self.horizon <= 0:
            raise ConfigError("horizon must be > 0")
        if self.phase3 is not None:
            for s, p in self.phase3.get("probabilities", {}).items():
                if not 0 < p <= 1:
                    raise ConfigError(f"phase3 probability for {s!r} must be in (0, 1]")
            if self.phase3.get("mechanism", "bernoulli") not in ("bernoulli", "srswor"):
                raise ConfigError("phase3 mechanism must be 'bernoulli' or 'srswor'")

    def linear_predictor(self, covariates: Mapping[str, np.ndarray]) -> np.ndarray:
        n = len(next(iter(covariates.values())))
        eta = np.zeros(n)
        for name, b in self.beta.items():
            eta += b * covariates[name]
        return eta

    def true_cumhaz(self, tau1: float, tau2: float) -> float:
        return float(self.hazard.cumulative(tau2) - self.hazard.cumulative(tau1))

    def true_pure_risk(self, x: Mapping[str, float], tau1: float, tau2: float) -> float:
        eta = sum(b * float(x[k]) for k, b in self.beta.items())
        return float(-np.expm1(-np.exp(eta) * self.true_cumhaz(tau1, tau2)))


# --- generation --------------------------------------------------------------


def _draw_covariates(config: SimConfig, rng) -> dict[str, np.ndarray]:
    n = config.n
    out = {}
    for name, spec in config.covariates.items():
        kind = spec["dist"]
        if kind == "bernoulli":
            out[name] = (rng.random(n) < spec["p"]).astype(float)
        elif kind == "normal":
            out[name] = spec.get("mean", 0.0) + spec.get("sd", 1.0) * rng.standard_normal(n)
        elif kind == "uniform":
            out[name] = rng.uniform(spec.get("low", 0.0), spec.get("high", 1.0), n)
        else:
            if spec.get("of") not in out:
                raise ConfigError(f"proxy {name!r} must follow its source covariate")
            out[name] = spec.get("coef", 1.0) * out[spec["of"]] + spec.get("sd", 1.0) * rng.standard_normal(n)
    return out


def _assign_strata(config: SimConfig, covariates) -> np.ndarray:
    rule = config.strata
    if not rule:
        return np.full(config.n, UNSTRATIFIED, dtype=object)
    values = covariates[rule["variable"]]
    codes = np.digitize(values, np.asarray(rule.get("cuts", []), dtype=float))
    return np.asarray([str(c) for c in codes], dtype=object)


def generate_cohort(config: SimConfig, seed) -> CohortTable:
    """Draw a fully observed cohort from the configured Cox model.

    Event times solve ``Lambda0(T) - Lambda0(entry) = E exp(-beta'x)`` with
    ``E ~ Exp(1)``; follow-up ends at the earliest of the event, an
    exponential censoring time and ``entry + horizon``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    covs = _draw_covariates(config, rng)
    n = config.n
    if config.entry is None:
        entry = np.zeros(n)
        timescale = TimeScale(("time",))
    else:
        entry = rng.uniform(config.entry[0], config.entry[1], n)
        timescale = TimeScale(("entry", "exit"))
    e = rng.standard_exponential(n)
    c = rng.standard_exponential(n)
    event = config.hazard.inverse(config.hazard.cumulative(entry) + e * np.exp(-config.linear_predictor(covs)))
    end = np.full(n, np.inf)
    if config.censoring_rate > 0:
        end = entry + c / config.censoring_rate
    if config.horizon is not None:
        end = np.minimum(end, entry + config.horizon)
    status = (event <= end).astype(np.int8)
    exit_ = np.where(status == 1, event, end)
    if not np.all(np.isfinite(exit_)):
        raise ConfigError("follow-up is unbounded: set horizon, censoring_rate or a positive final hazard")
    return CohortTable(
        entry=entry, exit=exit_, status=status, covariates=covs, phase2_columns=config.phase2,
        stratum=_assign_strata(config, covs), ids=np.arange(1, n + 1), timescale=timescale,
    )


def _counts_by_stratum(labels, m) -> dict[str, int]:
    levels = sorted(set(labels.tolist()))
    if isinstance(m, Mapping):
        missing = sorted(set(levels) - {str(k) for k in m})
        if missing:
            raise ConfigError(f"m lacks strata {missing}")
        return {s: int(m[s]) for s in levels}
    if len(levels) != 1:
        raise ConfigError("a single m needs an unstratified design")
    return {levels[0]: int(m)}


def sample_subcohort(cohort: CohortTable, m, rng, mask_phase2: bool = True) -> CohortTable:
    """SRSWOR of ``m[j]`` members within each stratum, independent across strata.

    Phase-two covariates of subjects outside the case-cohort sample are set
    to ``NaN`` unless ``mask_phase2`` is false.
    """
    counts = _counts_by_stratum(cohort.stratum, m)
    chosen = np.zeros(len(cohort), dtype=bool)
    for s, mj in counts.items():
        members = np.flatnonzero(cohort.stratum == s)
        if mj > len(members):
            raise MTooLarge(s, mj, len(members))
        chosen[rng.choice(members, size=mj, replace=False)] = True
    out = cohort.replace(in_subcohort=chosen)
    if mask_phase2:
        out = _mask(out, out.in_phase2)
    return out


def _mask(cohort: CohortTable, observed) -> CohortTable:
    covs = dict(cohort.covariates)
    for name in cohort.phase2_columns:
        covs[name] = np.where(observed, covs[name], np.nan)
    return cohort.replace(covariates=covs)


def phase3_strata(cohort: CohortTable, rule: str = "status") -> np.ndarray:
    if rule == "status":
        return np.asarray([str(s) for s in cohort.status], dtype=object)
    if rule == "stratum":
        return cohort.stratum.copy()
    return np.full(len(cohort), UNSTRATIFIED, dtype=object)


def sample_phase3(cohort: CohortTable, probabilities: Mapping[str, float], rng, strata: str = "status",
                  mechanism: str = "bernoulli", provide_weights: bool = True) -> CohortTable:
    """Retain phase-two members within phase-three strata.

    ``bernoulli`` keeps each member independently with its stratum's
    probability; ``srswor`` keeps exactly ``round(p * count)``. Phase-two
    covariates of dropped members become ``NaN``. With ``provide_weights``
    the known weights ``1/p`` are attached as ``weight3``.
    """
    s3 = phase3_strata(cohort, strata)
    phase2 = cohort.in_phase2
    keep = np.zeros(len(cohort), dtype=bool)
    w3 = np.zeros(len(cohort))
    for s in sorted(set(s3[phase2].tolist())):
        p = float(probabilities[s])
        members = np.flatnonzero(phase2 & (s3 == s))
        if mechanism == "srswor":
            k = int(round(p * len(members)))
            keep[rng.choice(members, size=k, replace=False)] = True
        else:
            keep[members[rng.random(len(members)) < p]] = True
        w3[members] = 1.0 / p
    out = cohort.replace(in_phase3=keep, stratum3=s3, weight3=w3 if provide_weights else None)
    return _mask(out, keep)


# --- Monte Carlo ---------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisSpec:
    """Which analysis each replicate runs, plus the pure risk targets."""

    cox_phase1: tuple[str, ...]
    cox_phase2: tuple[str, ...] = ()
    sampled: bool = True
    calibrated: bool = False
    aux_method: str = "Shin"
    predictors_cox_phase2: Mapping | Sequence | None = None
    phase3_weights: str = "estimated"
    calibrate_cases: bool = False
    profiles: tuple = ()
    tau1: float | None = None
    tau2: float | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnalysisSpec":
        d = dict(d)
        for key in ("cox_phase1", "cox_phase2"):
            if key in d:
                d[key] = tuple(d[key])
        if "profiles" in d:
            d["profiles"] = tuple(dict(p) for p in d["profiles"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"analysis spec: {exc}") from None

    @property
    def covariates(self):
        return self.cox_phase1 + self.cox_phase2


@dataclass
class MonteCarloResult:
    """Per-replicate estimates and variances, one column per parameter."""

    parameters: list[str]
    truth: np.ndarray
    estimates: np.ndarray
    V: dict[str, np.ndarray]
    V_robust: dict[str, np.ndarray]
    failures: int = 0
    failure_messages: list[str] = field(default_factory=list)

    @property
    def variants(self):
        return list(self.V)

    def coverage(self, variant=NO_VARIANT, robust=False):
        """Fraction of 95% Wald intervals containing the truth (NaN without V)."""
        var = (self.V_robust if robust else self.V)[variant]
        hit = np.abs(self.estimates - self.truth) <= Z95 * np.sqrt(var)
        return np.where(np.all(np.isnan(var), axis=0), np.nan, hit.mean(axis=0))

    def summary(self) -> list[dict]:
        """One row per parameter and variance variant."""
        rows = []
        est = self.estimates
        reps = est.shape[0]
        for variant in self.variants:
            V, Vr = self.V[variant], self.V_robust[variant]
            cov_v = self.coverage(variant)
            cov_r = self.coverage(variant, robust=True)
            no_v = np.all(np.isnan(V), axis=0)
            for k, name in enumerate(self.parameters):
                rows.append({
                    "parameter": name,
                    "variant": variant or "default",
                    "truth": float(self.truth[k]),
                    "mean_estimate": float(est[:, k].mean()),
                    "mc_se_mean": float(est[:, k].std(ddof=1) / np.sqrt(reps)),
                    "empirical_variance": float(est[:, k].var(ddof=1)),
                    "mean_V": _nanmean(V[:, k]),
                    "mean_V_robust": float(Vr[:, k].mean()),
                    "coverage_V": None if no_v[k] else float(cov_v[k]),
                    "coverage_V_robust": float(cov_r[k]),
                    "mean_ratio_robust_to_V": _nanmean(Vr[:, k] / V[:, k]),
                    "fraction_robust_ge_V": None if no_v[k] else float(np.mean(Vr[:, k] >= V[:, k])),
                    "replicates": int(reps),
                })
        return rows


def _nanmean(values):
    values = values[~np.isnan(values)]
    return float(values.mean()) if len(values) else None


def _replicate_streams(seed: int, r: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed, spawn_key=(r,)).spawn(3)]


def draw_replicate(config: SimConfig, spec: AnalysisSpec, r: int) -> CohortTable:
    """The analysed data set of replicate ``r``."""
    rc, rs, r3 = _replicate_streams(config.seed, r)
    cohort = generate_cohort(config, rc)
    if spec.sampled:
        if config.m is None:
            raise ConfigError("sampled analysis needs m")
        cohort = sample_subcohort(cohort, config.m, rs)
    if config.phase3 is not None:
        cohort = sample_phase3(
            cohort, config.phase3["probabilities"], r3, strata=config.phase3.get("strata", "status"),
            mechanism=config.phase3.get("mechanism", "bernoulli"),
            provide_weights=spec.phase3_weights == "design",
        )
    return cohort


def _one_replicate(config: SimConfig, spec: AnalysisSpec, r: int, tau1: float, tau2: float):
    cohort = draw_replicate(config, spec, r)
    mode = spec.phase3_weights if config.phase3 is not None else "both"
    res = analyze_cohort(
        cohort, spec.cox_phase1, spec.cox_phase2, calibrated=spec.calibrated, aux_method=spec.aux_method,
        predictors_cox_phase2=spec.predictors_cox_phase2, tau1=tau1, tau2=tau2,
        profiles=list(spec.profiles), weights_phase3_type=mode, keep_influences=False,
        calibrate_cases=spec.calibrate_cases,
    )
    p = res.p
    out = {}
    for variant, report in res.reports.items():
        V, Vr = report.diag()
        rows = res.pure_risk_table(variant=variant)
        est = np.concatenate([res.beta, [res.Lambda0], [row[0] for row in rows]])
        v = np.full(len(est), np.nan) if V is None else np.concatenate([V[:p], [V[p]], [row[1] for row in rows]])
        vr = np.concatenate([Vr[:p], [Vr[p]], [row[2] for row in rows]])
        out[variant] = (est, v, vr)
    return out


def _run_one(config, spec, r, tau1, tau2):
    try:
        return r, _one_replicate(config, spec, r, tau1, tau2), None
    except CaseCohortError as exc:
        return r, None, f"replicate {r}: {type(exc).__name__}: {exc}"


def thread_count(n_jobs=None) -> int:
    if n_jobs is not None:
        return int(n_jobs)
    return int(os.environ.get(THREADS_ENV, "1"))


def run_monte_carlo(config: SimConfig, spec: AnalysisSpec, replicates: int | None = None,
                    n_jobs: int | None = None) -> MonteCarloResult:
    """Analyse ``replicates`` independent data sets and collect the results.

    Replicates that raise a package error are counted and skipped; more
    than 2% failures abort the experiment.
    """
    R = config.replicates if replicates is None else int(replicates)
    if spec.tau1 is None or spec.tau2 is None:
        raise ConfigError("Monte Carlo analysis needs tau1 and tau2 so the target is fixed")
    tau1, tau2 = float(spec.tau1), float(spec.tau2)
    jobs = thread_count(n_jobs)
    if jobs == 1:
        results = [_run_one(config, spec, r, tau1, tau2) for r in range(R)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(_run_one)(config, spec, r, tau1, tau2) for r in range(R))
    results.sort(key=lambda t: t[0])
    failures = [msg for _, out, msg in results if out is None]
    if len(failures) > MAX_FAILURE_FRACTION * R:
        raise TooManyReplicateFailures(f"{len(failures)} of {R} replicates failed; first: {failures[0]}")
    good = [out for _, out, _ in results if out is not None]
    names = list(spec.covariates)
    params = [f"beta.{c}" for c in names] + ["Lambda0"] + [f"Pi.{i + 1}" for i in range(len(spec.profiles))]
    truth = np.concatenate([
        [float(config.beta.get(c, 0.0)) for c in names], [config.true_cumhaz(tau1, tau2)],
        [config.true_pure_risk(x, tau1, tau2) for x in spec.profiles],
    ])
    variants = list(good[0])
    estimates = np.array([g[variants[0]][0] for g in good])
    V = {v: np.array([g[v][1] for g in good]) for v in variants}
    Vr = {v: np.array([g[v][2] for g in good]) for v in variants}
    return MonteCarloResult(params, truth, estimates, V, Vr, len(failures), failures)


# --- output --------------------------------------------------------------------


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def summary_json(result: MonteCarloResult) -> str:
    payload = {"summary": result.summary(), "failures": result.failures,
               "failure_messages": result.failure_messages}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_summary(result: MonteCarloResult, prefix) -> tuple[str, str]:
    """Write ``<prefix>.csv`` and ``<prefix>.json``; return both paths."""
    csv_path, json_path = f"{prefix}.csv", f"{prefix}.json"
    with open(csv_path, "w", newline="") as fh:
        fh.write(summary_csv(result.summary()))
    with open(json_path, "w") as fh:
        fh.write(summary_json(result))
    return csv_path, json_path
