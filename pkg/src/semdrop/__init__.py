"""Selection-model SEM estimation for longitudinal data with dropout and missing covariates."""

from .data import (
    CovariateMissingnessParams,
    DropoutParams,
    LongitudinalDataset,
    PseudoComplete,
    ResponseModelParams,
    ar1_covariance,
    conditional_normal,
    dropout_time,
    mvn_loglik,
    read_dataset,
    write_dataset,
)
from .estimate import FitResult, fit
from .sem import SemConfig, sem_run

__version__ = "0.1.0"
