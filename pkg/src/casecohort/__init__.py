"""Cox model inference for relative hazard and pure risk from case-cohort data."""

from .analysis import CaseCohortResult, analyze_cohort, estimate_pure_risk, load_fit, save_fit
from .cox import baseline_hazard, cumulative_hazard, fit_cox, fit_cox_arrays
from .data_model import CohortTable, ColumnSchema, load_cohort, resolve_weights, strata_summary
from .errors import CaseCohortError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "CaseCohortError",
    "CaseCohortResult",
    "CohortTable",
    "ColumnSchema",
    "NumericalError",
    "ValidationError",
    "analyze_cohort",
    "baseline_hazard",
    "cumulative_hazard",
    "estimate_pure_risk",
    "fit_cox",
    "fit_cox_arrays",
    "load_cohort",
    "load_fit",
    "resolve_weights",
    "save_fit",
    "strata_summary",
]
