"""Cohort data: ingestion, validation, strata summaries and design weights.

A cohort is held column-wise in a :class:`CohortTable`. Phase-two
covariates may be absent (``NaN``) for subjects outside the phase-two
sample; every other numeric column must be complete.

Risk-set convention used throughout the package: a subject is at risk at
time ``t`` iff ``entry < t <= exit``, and an event occurs at ``exit`` when
``status == 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    InvariantViolation,
    MissingColumn,
    NegativeOrZeroProvidedWeight,
    ParseError,
    UnknownStratumInOverride,
    ZeroSampled,
)

MISSING_TOKENS = ("", "NA")
UNSTRATIFIED = "all"

TIME_ON_STUDY = "time-on-study"
AGE_SCALE = "age"


@dataclass(frozen=True)
class TimeScale:
    """Which time columns define follow-up.

    ``columns`` has one name for a time-on-study scale (entry is 0) and two
    names (entry, exit) for an age scale.
    """

    columns: tuple[str, ...]

    def __post_init__(self):
        if len(self.columns) not in (1, 2):
            raise InvariantViolation(None, "time needs one column (time-on-study) or two (entry, exit)")

    @property
    def kind(self) -> str:
        return TIME_ON_STUDY if len(self.columns) == 1 else AGE_SCALE


@dataclass(frozen=True)
class RiskProfile:
    """Covariate profile ``x`` and interval ``(tau1, tau2]`` for a pure risk."""

    x: Mapping[str, float]
    tau1: float
    tau2: float

    def __post_init__(self):
        if not self.tau1 < self.tau2:
            raise InvariantViolation(None, f"tau1={self.tau1} must be < tau2={self.tau2}")

    def vector(self, covariates: Sequence[str]) -> np.ndarray:
        missing = [c for c in covariates if c not in self.x]
        if missing:
            raise InvariantViolation(None, f"profile lacks covariates {missing}")
        return np.array([float(self.x[c]) for c in covariates])


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from roles to column names in a cohort file."""

    time: Sequence[str]
    status: str
    covariates: Sequence[str] = ()
    phase2: Sequence[str] = ()
    subcohort: str | None = None
    strata: str | None = None
    phase3: str | None = None
    strata_phase3: str | None = None
    weights_phase2: str | None = None
    weights_phase3: str | None = None
    id: str | None = None


@dataclass(eq=False)
class CohortTable:
    """One row per cohort member, stored column-wise.

    Parameters
    ----------
    entry, exit : ndarray
        Entry and exit times. ``entry`` is all zeros on a time-on-study scale.
    status : ndarray
        Event indicator, 0 or 1.
    covariates : dict of str -> ndarray
        Numeric columns. ``NaN`` marks an absent phase-two value.
    phase2_columns : tuple of str
        Columns allowed to be absent outside the phase-two (or phase-three)
        sample.
    stratum : ndarray of str, optional
        Phase-two sampling stratum labels; a single stratum when omitted.
    in_subcohort : ndarray of bool, optional
        Subcohort indicator. ``None`` means the whole cohort is observed.
    in_phase3, stratum3, weight2, weight3 : optional
        Phase-three indicator and strata, provided phase-two and phase-three
        weights.
    """

    entry: np.ndarray
    exit: np.ndarray
    status: np.ndarray
    covariates: dict[str, np.ndarray]
    phase2_columns: tuple[str, ...] = ()
    stratum: np.ndarray | None = None
    in_subcohort: np.ndarray | None = None
    in_phase3: np.ndarray | None = None
    stratum3: np.ndarray | None = None
    weight2: np.ndarray | None = None
    weight3: np.ndarray | None = None
    ids: np.ndarray | None = None
    timescale: TimeScale = field(default_factory=lambda: TimeScale(("time",)))

    def __post_init__(self):
        n = len(self.exit)
        if n == 0:
            raise InvariantViolation(None, "no subjects")
        self.entry = np.asarray(self.entry, dtype=float)
        self.exit = np.asarray(self.exit, dtype=float)
        self.status = np.asarray(self.status).astype(np.int8)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        self.phase2_columns = tuple(self.phase2_columns)
        if self.stratum is None:
            self.stratum = np.full(n, UNSTRATIFIED, dtype=object)
        else:
            self.stratum = np.asarray([str(s) for s in self.stratum], dtype=object)
        for name in ("in_subcohort", "in_phase3"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value)
                bad = ~np.isin(value, (0, 1))
                if bad.any():
                    raise InvariantViolation(int(np.argmax(bad)) + 1, f"{name} must be 0 or 1")
                setattr(self, name, value.astype(bool))
        if self.stratum3 is not None:
            self.stratum3 = np.asarray([str(s) for s in self.stratum3], dtype=object)
        for name in ("weight2", "weight3"):
            if getattr(self, name) is not None:
                setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self._validate()

    def _validate(self):
        n = len(self)
        for name in ("entry", "status"):
            if len(getattr(self, name)) != n:
                raise InvariantViolation(None, f"{name} has length {len(getattr(self, name))}, expected {n}")
        for name, col in self.covariates.items():
            if len(col) != n:
                raise InvariantViolation(None, f"covariate {name} has wrong length")
        bad = ~(self.entry < self.exit)
        if bad.any():
            i = int(np.argmax(bad))
            raise InvariantViolation(i + 1, f"entry ({self.entry[i]}) must be < exit ({self.exit[i]})")
        bad = ~np.isin(self.status, (0, 1))
        if bad.any():
            raise InvariantViolation(int(np.argmax(bad)) + 1, "status must be 0 or 1")
        phase2 = self.in_phase2
        if self.in_phase3 is not None:
            bad = self.in_phase3 & ~phase2
            if bad.any():
                raise InvariantViolation(int(np.argmax(bad)) + 1, "phase-three member is not in the phase-two sample")
        observed = self.in_phase3 if self.in_phase3 is not None else phase2
        for name, col in self.covariates.items():
            required = observed if name in self.phase2_columns else np.ones(n, dtype=bool)
            bad = required & np.isnan(col)
            if bad.any():
                raise InvariantViolation(int(np.argmax(bad)) + 1, f"covariate {name!r} is missing")

    def __len__(self):
        return len(self.exit)

    @property
    def in_phase2(self) -> np.ndarray:
        """Cases plus subcohort members; everyone for a whole-cohort analysis."""
        if self.in_subcohort is None:
            return np.ones(len(self), dtype=bool)
        return self.in_subcohort | (self.status == 1)

    @property
    def is_whole_cohort(self) -> bool:
        return self.in_subcohort is None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Covariate columns as an (n, len(names)) array."""
        try:
            cols = [self.covariates[c] for c in names]
        except KeyError as exc:
            raise MissingColumn(exc.args[0]) from None
        if not cols:
            return np.zeros((len(self), 0))
        return np.column_stack(cols)

    def replace(self, **changes) -> "CohortTable":
        fields = dict(
            entry=self.entry, exit=self.exit, status=self.status, covariates=self.covariates,
            phase2_columns=self.phase2_columns, stratum=self.stratum, in_subcohort=self.in_subcohort,
            in_phase3=self.in_phase3, stratum3=self.stratum3, weight2=self.weight2,
            weight3=self.weight3, ids=self.ids, timescale=self.timescale,
        )
        fields.update(changes)
        return CohortTable(**fields)


def _parse_float(token, row, column, allow_missing):
    token = token.strip()
    if token in MISSING_TOKENS:
        if allow_missing:
            return math.nan
        raise InvariantViolation(row, f"required value in column {column!r} is missing")
    try:
        value = float(token)
    except ValueError:
        raise ParseError(row, column, token) from None
    if math.isnan(value):
        raise ParseError(row, column, token)
    return value


def load_cohort(path, schema: ColumnSchema, delimiter: str = ",") -> CohortTable:
    """Read a CSV cohort file and return a validated :class:`CohortTable`.

    Row numbers in errors count data rows from 1 (the header is row 0).
    Empty cells and the literal ``NA`` mark missing values; they are only
    accepted in phase-two covariate columns and optional weight columns.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvariantViolation(None, "no subjects") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    index = {name: j for j, name in enumerate(header)}

    def column(name):
        if name not in index:
            raise MissingColumn(name)
        j = index[name]
        out = []
        for i, r in enumerate(rows, start=1):
            if j >= len(r):
                raise ParseError(i, name, "")
            out.append(r[j])
        return out

    def numeric(name, allow_missing=False):
        return np.array([_parse_float(t, i, name, allow_missing) for i, t in enumerate(column(name), start=1)])

    def indicator(name):
        values = numeric(name)
        bad = ~np.isin(values, (0.0, 1.0))
        if bad.any():
            raise InvariantViolation(int(np.argmax(bad)) + 1, f"{name} must be 0 or 1")
        return values.astype(np.int8)

    if not rows:
        raise InvariantViolation(None, "no subjects")

    time = tuple(schema.time)
    timescale = TimeScale(time)
    if len(time) == 1:
        exit_ = numeric(time[0])
        entry = np.zeros_like(exit_)
    else:
        entry, exit_ = numeric(time[0]), numeric(time[1])

    phase2 = tuple(schema.phase2)
    names = list(dict.fromkeys(list(schema.covariates) + list(phase2)))
    covariates = {c: numeric(c, allow_missing=c in phase2) for c in names}

    def labels(name):
        return None if name is None else np.array([t.strip() for t in column(name)], dtype=object)

    weight2 = numeric(schema.weights_phase2, allow_missing=True) if schema.weights_phase2 else None
    weight3 = numeric(schema.weights_phase3, allow_missing=True) if schema.weights_phase3 else None

    return CohortTable(
        entry=entry,
        exit=exit_,
        status=indicator(schema.status),
        covariates=covariates,
        phase2_columns=phase2,
        stratum=labels(schema.strata),
        in_subcohort=indicator(schema.subcohort) if schema.subcohort else None,
        in_phase3=indicator(schema.phase3) if schema.phase3 else None,
        stratum3=labels(schema.strata_phase3),
        weight2=weight2,
        weight3=weight3,
        ids=labels(schema.id),
        timescale=timescale,
    )


def write_cohort(cohort: CohortTable, path, delimiter: str = ",") -> ColumnSchema:
    """Write ``cohort`` as CSV and return the schema that reloads it.

    Floats are written with ``repr`` so finite values round-trip exactly.
    """
    header, cols = [], []

    def add(name, values, fmt=repr):
        header.append(name)
        cols.append([("NA" if isinstance(v, float) and math.isnan(v) else fmt(v)) for v in values])

    if cohort.ids is not None:
        add("id", cohort.ids, str)
    if cohort.timescale.kind == AGE_SCALE:
        add(cohort.timescale.columns[0], cohort.entry.tolist())
    add(cohort.timescale.columns[-1], cohort.exit.tolist())
    add("status", cohort.status.tolist(), str)
    for name, col in cohort.covariates.items():
        add(name, col.tolist())
    stratified = not np.all(cohort.stratum == UNSTRATIFIED)
    if stratified:
        add("stratum", cohort.stratum, str)
    if cohort.in_subcohort is not None:
        add("subcohort", cohort.in_subcohort.astype(int).tolist(), str)
    if cohort.in_phase3 is not None:
        add("phase3", cohort.in_phase3.astype(int).tolist(), str)
    if cohort.stratum3 is not None:
        add("stratum3", cohort.stratum3, str)
    if cohort.weight2 is not None:
        add("weight2", cohort.weight2.tolist())
    if cohort.weight3 is not None:
        add("weight3", cohort.weight3.tolist())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(zip(*cols))
    return ColumnSchema(
        time=cohort.timescale.columns,
        status="status",
        covariates=[c for c in cohort.covariates if c not in cohort.phase2_columns],
        phase2=cohort.phase2_columns,
        subcohort="subcohort" if cohort.in_subcohort is not None else None,
        strata="stratum" if stratified else None,
        phase3="phase3" if cohort.in_phase3 is not None else None,
        strata_phase3="stratum3" if cohort.stratum3 is not None else None,
        weights_phase2="weight2" if cohort.weight2 is not None else None,
        weights_phase3="weight3" if cohort.weight3 is not None else None,
        id="id" if cohort.ids is not None else None,
    )


@dataclass(frozen=True)
class StrataSummary:
    """Cohort counts ``n`` and sampled counts ``m`` per phase-two stratum."""

    labels: tuple[str, ...]
    n: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        for label, nj, mj in zip(self.labels, self.n, self.m):
            if mj < 1:
                raise ZeroSampled(label)
            if mj > nj:
                raise InvariantViolation(None, f"stratum {label!r}: m={mj} exceeds n={nj}")

    @property
    def design_weights(self) -> np.ndarray:
        return self.n / self.m

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def index(self, stratum: np.ndarray) -> np.ndarray:
        """Integer stratum code for each label in ``stratum``."""
        lookup = {label: j for j, label in enumerate(self.labels)}
        return np.array([lookup[s] for s in stratum], dtype=np.intp)


def design_weight(n: int, m: int) -> float:
    """Non-case design weight ``n/m`` of a stratum."""
    if m < 1:
        raise ZeroSampled("?")
    return n / m


def strata_summary(cohort: CohortTable, counts_override: Mapping[str, int] | None = None) -> StrataSummary:
    """Count cohort members and subcohort members in each stratum.

    ``m`` counts every subcohort member of the stratum, cases included,
    unless ``counts_override`` supplies the number sampled. A whole-cohort
    table yields the census summary ``m = n``.
    """
    labels = tuple(sorted(set(cohort.stratum.tolist()), key=_label_key))
    n = np.array([np.sum(cohort.stratum == s) for s in labels], dtype=np.int64)
    if counts_override is not None:
        override = {str(k): int(v) for k, v in counts_override.items()}
        unknown = sorted(set(override) - set(labels))
        if unknown:
            raise UnknownStratumInOverride(f"override names unknown strata {unknown}")
        missing = sorted(set(labels) - set(override))
        if missing:
            raise UnknownStratumInOverride(f"override lacks strata {missing}")
        m = np.array([override[s] for s in labels], dtype=np.int64)
    elif cohort.in_subcohort is None:
        m = n.copy()
    else:
        m = np.array([np.sum(cohort.in_subcohort & (cohort.stratum == s)) for s in labels], dtype=np.int64)
    return StrataSummary(labels, n, m)


def _label_key(label):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def resolve_weights(cohort: CohortTable, summary: StrataSummary) -> np.ndarray:
    """Phase-two design weights: 1 for cases, ``n_j/m_j`` for sampled
    non-cases, 0 for everyone outside the phase-two sample.

    A provided ``weight2`` column overrides the computed value for
    phase-two members.
    """
    phase2 = cohort.in_phase2
    weights = np.zeros(len(cohort))
    if cohort.is_whole_cohort:
        weights[:] = 1.0
    else:
        strata = summary.index(cohort.stratum)
        noncase = phase2 & (cohort.status == 0)
        weights[noncase] = summary.design_weights[strata[noncase]]
        weights[cohort.status == 1] = 1.0
    if cohort.weight2 is not None:
        provided = cohort.weight2[phase2]
        bad = ~(provided > 0)
        if bad.any():
            row = int(np.flatnonzero(phase2)[np.argmax(bad)]) + 1
            raise NegativeOrZeroProvidedWeight(f"row {row}: provided phase-two weight must be > 0")
        weights[phase2] = provided
    return weights


@dataclass(frozen=True)
class SamplingDesign:
    """Per-subject design information consumed by the variance estimators."""

    stratum: np.ndarray  # integer codes into summary
    summary: StrataSummary
    status: np.ndarray
    in_phase2: np.ndarray

    @classmethod
    def from_cohort(cls, cohort: CohortTable, summary: StrataSummary) -> "SamplingDesign":
        return cls(summary.index(cohort.stratum), summary, cohort.status.copy(), cohort.in_phase2)

    @property
    def n(self) -> int:
        return len(self.status)

    @property
    def sampled_noncase(self) -> np.ndarray:
        return self.in_phase2 & (self.status == 0)
