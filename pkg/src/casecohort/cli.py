"""Command-line interface: ``casecohort analyze | purerisk | simulate``.

Flags of ``analyze`` are kebab-case forms of the dotted argument names
listed in the README; each ``--help`` line shows that name as
``[R: name]``. Results go to stdout (or ``--output``) as JSON. Exit codes:
0 on success, 2 for invalid input, 3 for numerical failure; errors are written
to stderr as a JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Sequence

import numpy as np

from .analysis import analyze_cohort, estimate_pure_risk, load_fit, save_fit
from .data_model import ColumnSchema, load_cohort
from .errors import CaseCohortError, ConfigError, NumericalError, ValidationError
from .multiphase import MODES
from .simulation import AnalysisSpec, SimConfig, run_monte_carlo, write_summary

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3


# --- argument value parsers ----------------------------------------------------


def parse_mapping(text: str, value=str) -> dict:
    """``'{"a": 1}'`` (JSON) or ``a=1,b=2``."""
    text = text.strip()
    if text.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON mapping: {exc}") from None
        return {str(k): value(v) if not isinstance(v, list) else v for k, v in data.items()}
    out = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"expected name=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = value(v.strip())
    return out


def parse_predictors(text: str):
    """A JSON object of lists (per phase-two covariate) or a comma list shared by all."""
    text = text.strip()
    if text.startswith("{"):
        data = json.loads(text)
        return {k: [v] if isinstance(v, str) else list(v) for k, v in data.items()}
    return [p.strip() for p in text.split(",") if p.strip()]


def parse_profiles(text: str, delimiter: str = ",") -> list[dict]:
    """Profiles inline as JSON, or ``@path`` to a CSV (header = covariates) or JSON file.

    JSON may be a list of objects or one object of equal-length lists.
    """
    if text.startswith("@"):
        path = text[1:]
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read profiles: {exc}") from None
        if not path.endswith(".json"):
            rows = list(csv.DictReader(raw.splitlines(), delimiter=delimiter))
            try:
                return [{k.strip(): float(v) for k, v in row.items()} for row in rows]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad profile value in {path}: {exc}") from None
        text = raw
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad profiles JSON: {exc}") from None
    if isinstance(data, dict):
        lengths = {len(v) if isinstance(v, list) else 1 for v in data.values()}
        if len(lengths) != 1:
            raise ConfigError("profile columns differ in length")
        k = lengths.pop()
        data = [{name: (v[i] if isinstance(v, list) else v) for name, v in data.items()} for i in range(k)]
    return [{str(k): float(v) for k, v in row.items()} for row in data]


# --- parser ----------------------------------------------------------------------


def _r(name: str, text: str) -> str:
    return f"[R: {name}] {text}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casecohort", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="fit the Cox model and estimate variances")
    a.add_argument("--data", required=True, help=_r("data", "CSV file with one row per cohort member"))
    a.add_argument("--status", required=True, help=_r("status", "case status column (0/1)"))
    a.add_argument("--time", required=True, nargs="+", metavar="COL",
                   help=_r("time", "one column (time on study) or two (entry, exit ages)"))
    a.add_argument("--cox-phase1", nargs="+", default=[], metavar="COL",
                   help=_r("cox.phase1", "Cox covariates measured on the whole cohort"))
    a.add_argument("--cox-phase2", nargs="+", default=[], metavar="COL",
                   help=_r("cox.phase2", "Cox covariates measured on phase-two members only"))
    a.add_argument("--subcohort", help=_r("subcohort", "subcohort indicator column; omit for a whole-cohort analysis"))
    a.add_argument("--strata", help=_r("strata", "subcohort sampling stratum column"))
    a.add_argument("--subcohort-strata-counts", type=lambda t: parse_mapping(t, int),
                   help=_r("subcohort.strata.counts", "sampled counts per stratum, e.g. '0=3177,1=2380'"))
    a.add_argument("--weights-phase2", help=_r("weights.phase2", "column of known phase-two weights"))
    a.add_argument("--calibrated", action="store_true", help=_r("calibrated", "calibrate the design weights"))
    a.add_argument("--predict", action=argparse.BooleanOptionalAction, default=True,
                   help=_r("predict", "predict phase-two covariates from --predictors-cox-phase2"))
    a.add_argument("--predicted-cox-phase2", type=parse_mapping,
                   help=_r("predicted.cox.phase2", "columns of predicted phase-two covariates, e.g. 'X2=X2.pred'"))
    a.add_argument("--predictors-cox-phase2", type=parse_predictors,
                   help=_r("predictors.cox.phase2", "predictor columns: 'Z1,Z2' or JSON {\"X2\": [\"Z1\"]}"))
    a.add_argument("--aux-vars", nargs="+", metavar="COL", help=_r("aux.vars", "user-provided auxiliary columns"))
    a.add_argument("--aux-method", choices=("Breslow", "Shin"), default="Shin",
                   help=_r("aux.method", "auxiliary construction (default Shin)"))
    a.add_argument("--tau1", type=float, help=_r("Tau1", "left end of the risk interval (default: first event time)"))
    a.add_argument("--tau2", type=float, help=_r("Tau2", "right end of the risk interval (default: last event time)"))
    a.add_argument("--x", dest="profiles", help=_r("x", "covariate profiles: inline JSON or @file (.csv or .json)"))
    a.add_argument("--phase3", help=_r("phase3", "phase-three membership column"))
    a.add_argument("--strata-phase3", help=_r("strata.phase3", "phase-three stratum column"))
    a.add_argument("--weights-phase3", help=_r("weights.phase3", "column of known phase-three weights"))
    a.add_argument("--weights-phase3-type", choices=MODES, default="both",
                   help=_r("weights.phase3.type", "design, estimated or both (default both)"))
    a.add_argument("--id", help="subject identifier column (used by --dump-influence)")
    a.add_argument("--delimiter", default=",", help="CSV field delimiter (default ',')")
    a.add_argument("--output", help="write the JSON result here instead of stdout")
    a.add_argument("--save-fit", metavar="PATH", help="write a fit bundle for the purerisk command")
    a.add_argument("--dump-influence", metavar="PATH", help="write per-subject influences as CSV")
    a.add_argument("--score-tol", type=float, default=1e-8, help="Newton convergence tolerance on the score")
    a.add_argument("--max-iter", type=int, default=25, help="maximum Newton iterations")

    p = sub.add_parser("purerisk", help="pure risks for new profiles from a saved fit")
    p.add_argument("--fit", required=True, help="bundle written by analyze --save-fit")
    p.add_argument("--x", dest="profiles", required=True, help=_r("x", "profiles: inline JSON or @file"))
    p.add_argument("--delimiter", default=",", help="delimiter of a CSV profile file")
    p.add_argument("--output", help="write the JSON result here instead of stdout")

    s = sub.add_parser("simulate", help="Monte Carlo experiment from a JSON config")
    s.add_argument("config", help="JSON file with the data-generating model and an 'analysis' block")
    s.add_argument("--output-prefix", required=True, help="writes PREFIX.csv and PREFIX.json")
    s.add_argument("--replicates", type=int, help="override the configured number of replicates")
    s.add_argument("--threads", type=int, help="worker processes (default: CASECOHORT_THREADS or 1)")
    return parser


# --- commands -----------------------------------------------------------------------


def _emit(payload, path):
    text = json.dumps(payload, indent=2) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _schema(args) -> ColumnSchema:
    extra = []
    if args.predicted_cox_phase2:
        extra += list(args.predicted_cox_phase2.values())
    preds = args.predictors_cox_phase2
    if preds:
        extra += [c for v in preds.values() for c in v] if isinstance(preds, dict) else list(preds)
    if args.aux_vars:
        extra += list(args.aux_vars)
    covariates = list(dict.fromkeys(list(args.cox_phase1) + extra))
    covariates = [c for c in covariates if c not in args.cox_phase2]
    return ColumnSchema(
        time=tuple(args.time), status=args.status, covariates=tuple(covariates), phase2=tuple(args.cox_phase2),
        subcohort=args.subcohort, strata=args.strata, phase3=args.phase3, strata_phase3=args.strata_phase3,
        weights_phase2=args.weights_phase2, weights_phase3=args.weights_phase3, id=args.id,
    )


def _write_influence(result, cohort, path):
    names = [f"beta.{c}" for c in result.covariates] + ["Lambda0"]
    ids = cohort.ids if cohort.ids is not None else np.arange(1, len(cohort) + 1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "weight"] + names)
        for i, row in enumerate(result.influences):
            writer.writerow([ids[i], repr(float(result.weights[i]))] + [repr(float(v)) for v in row])


def cmd_analyze(args) -> int:
    if len(args.time) > 2:
        raise ConfigError("--time takes one or two columns")
    if not args.cox_phase1 and not args.cox_phase2:
        raise ConfigError("at least one covariate is needed in --cox-phase1 or --cox-phase2")
    profiles = parse_profiles(args.profiles, args.delimiter) if args.profiles else []
    try:
        cohort = load_cohort(args.data, _schema(args), delimiter=args.delimiter)
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc}") from None
    result = analyze_cohort(
        cohort, args.cox_phase1, args.cox_phase2, calibrated=args.calibrated, predict=args.predict,
        predicted_cox_phase2=args.predicted_cox_phase2, predictors_cox_phase2=args.predictors_cox_phase2,
        aux_vars=args.aux_vars, aux_method=args.aux_method, tau1=args.tau1, tau2=args.tau2,
        profiles=profiles, subcohort_strata_counts=args.subcohort_strata_counts,
        weights_phase3_type=args.weights_phase3_type,
        cox_options={"score_tol": args.score_tol, "max_iter": args.max_iter},
    )
    if args.save_fit:
        save_fit(result, args.save_fit)
    if args.dump_influence:
        _write_influence(result, cohort, args.dump_influence)
    _emit(result.to_dict(), args.output)
    return EXIT_OK


def cmd_purerisk(args) -> int:
    result = load_fit(args.fit)
    _emit(estimate_pure_risk(result, parse_profiles(args.profiles, args.delimiter)), args.output)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if "analysis" not in raw:
        raise ConfigError("config lacks an 'analysis' block")
    config = SimConfig.from_dict(raw)
    spec = AnalysisSpec.from_dict(raw["analysis"])
    result = run_monte_carlo(config, spec, replicates=args.replicates, n_jobs=args.threads)
    for path in write_summary(result, args.output_prefix):
        print(path)
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "purerisk": cmd_purerisk, "simulate": cmd_simulate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except CaseCohortError as exc:
        code = EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_INVALID
        payload = exc.to_dict()
        payload.setdefault("command", args.command)
        sys.stderr.write(json.dumps(payload) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
