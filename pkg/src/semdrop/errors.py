"""Exception hierarchy shared by every module."""


class SemDropError(Exception):
    """Base class for all package errors."""


class DomainError(SemDropError, ValueError):
    """A numeric argument lies outside the admissible domain."""


class PatternError(SemDropError, ValueError):
    """A missingness mask is not monotone (or not observed at occasion 1)."""


class DataError(SemDropError, ValueError):
    """The data are insufficient or inconsistent for the requested estimate."""


class DatasetFormatError(DataError):
    """Malformed dataset CSV; the message names the row and column."""


class ContractError(SemDropError, ValueError):
    """Inputs violate a structural contract (e.g. dimension mismatch)."""


class NumericError(SemDropError, ArithmeticError):
    """Linear-algebra breakdown (singular or non-SPD matrices, non-finite values)."""


class FitError(SemDropError):
    """The covariate imputation regression cannot be fitted."""


class DegenerateFitError(FitError):
    """Imputation regression has zero residual variance."""


class SamplerStallError(SemDropError):
    """The accept-reject S-step exceeded its attempt budget."""

    def __init__(self, message, acceptance_estimate=float("nan"), attempts=0, subject=None):
        super().__init__(message)
        self.acceptance_estimate = acceptance_estimate
        self.attempts = attempts
        self.subject = subject


class SeparationError(SemDropError):
    """Dropout logistic MLE does not exist (complete or quasi-complete separation)."""


class OptimizationError(SemDropError):
    """Newton-Raphson could not make progress."""


class NonConvergenceError(OptimizationError):
    """Iteration cap reached; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class DefinitenessError(SemDropError):
    """Information matrix inverse has a non-positive diagonal entry."""


class HarnessError(SemDropError):
    """Too many failed replications in a simulation study."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
