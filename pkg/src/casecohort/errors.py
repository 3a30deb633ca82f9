"""Exception hierarchy.

Validation problems (bad input, inconsistent design) derive from
``ValidationError``; failures of a numerical stage derive from
``NumericalError``. The CLI maps the two families to distinct exit codes.
"""


class CaseCohortError(Exception):
    """Base class for all package errors."""

    stage = "unknown"

    def to_dict(self):
        return {"error": type(self).__name__, "stage": self.stage, "message": str(self)}


class ValidationError(CaseCohortError):
    stage = "validation"


class NumericalError(CaseCohortError):
    stage = "numerical"


# --- input / data model -------------------------------------------------


class MissingColumn(ValidationError):
    stage = "load"

    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column!r} not found in header")


class ParseError(ValidationError):
    stage = "load"

    def __init__(self, row, column, token):
        self.row, self.column, self.token = row, column, token
        super().__init__(f"row {row}, column {column!r}: cannot parse {token!r}")


class InvariantViolation(ValidationError):
    stage = "load"

    def __init__(self, row, description):
        self.row = row
        where = f"row {row}: " if row is not None else ""
        super().__init__(where + description)


class UnknownStratumInOverride(ValidationError):
    stage = "strata"


class ZeroSampled(ValidationError):
    stage = "strata"

    def __init__(self, stratum):
        self.stratum = stratum
        super().__init__(f"no subcohort members sampled in stratum {stratum!r}")


class NegativeOrZeroProvidedWeight(ValidationError):
    stage = "weights"


class MTooLarge(ValidationError):
    stage = "sampling"

    def __init__(self, stratum, m, n):
        self.stratum = stratum
        super().__init__(f"stratum {stratum!r}: cannot sample m={m} from n={n}")


class EmptyPhase3Stratum(ValidationError):
    stage = "phase3"

    def __init__(self, stratum):
        self.stratum = stratum
        super().__init__(f"phase-three stratum {stratum!r} has no phase-three members")


class StaleArtifact(ValidationError):
    stage = "purerisk"


class ConfigError(ValidationError):
    stage = "config"


# --- numerical ----------------------------------------------------------


class SingularInformation(NumericalError):
    stage = "cox"


class NonConvergence(NumericalError):
    stage = "cox"

    def __init__(self, iterations, score_norm, stage=None):
        self.iterations, self.score_norm = iterations, score_norm
        if stage is not None:
            self.stage = stage
        super().__init__(
            f"no convergence after {iterations} iterations (max |score| = {score_norm:.3g})"
        )


class MonotoneLikelihood(NumericalError):
    stage = "cox"


class MRequiresAtLeastTwo(NumericalError):
    stage = "variance"


class NegativeVarianceDiagonal(NumericalError):
    stage = "variance"


class SingularDesign(NumericalError):
    stage = "prediction"


class SeparableLogistic(NumericalError):
    stage = "prediction"


class CalibrationSingular(NumericalError):
    stage = "calibration"


class CalibrationNonConvergence(NumericalError):
    stage = "calibration"

    def __init__(self, residual):
        self.residual = residual
        super().__init__(f"raking did not converge (relative residual {residual:.3g})")


class TooManyReplicateFailures(NumericalError):
    stage = "simulation"
