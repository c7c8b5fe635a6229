"""End-to-end estimation: impute covariates, run SEM per imputation, pool, Louis SEs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .data import LongitudinalDataset, DropoutParams, ResponseModelParams
from .errors import DataError, DefinitenessError, SemDropError
from .imputation import DEFAULT_K0, multiple_impute
from .louis import InformationResult, monte_carlo_information, pack_params, param_names, standard_errors
from .sem import SemConfig, pool_mi, sem_run

log = logging.getLogger(__name__)

DEFAULT_M_SE = 200


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: ResponseModelParams
    psi_hat: DropoutParams | None
    se: np.ndarray | None
    p_values: np.ndarray | None
    m: int
    names: tuple
    chains: tuple = field(default=())
    n_failed: int = 0
    information: InformationResult | None = None
    se_error: str | None = None

    @property
    def estimates(self) -> np.ndarray:
        return pack_params(self.theta_hat, self.psi_hat)

    def as_dict(self):
        return dict(zip(self.names, self.estimates))


def _one_chain(ds, x, config, rng):
    try:
        return sem_run(ds.with_covariates(x), config, rng)
    except SemDropError as exc:
        log.warning("SEM chain failed: %s", exc)
        return exc


def fit(ds: LongitudinalDataset, method: str = "regression", m: int = 10,
        config: SemConfig | None = None, rng=None, *, k0: int = DEFAULT_K0,
        m_se: int = DEFAULT_M_SE, compute_se: bool = True, jobs: int = 1) -> FitResult:
    """Estimate the selection model on ``ds``.

    Streams spawned from ``rng``: imputation, chains (one per completed set),
    standard errors.  When no covariate cell is missing the ``m`` completed
    sets would be identical, so a single chain is run.
    """
    config = config or SemConfig()
    rng = rng if rng is not None else np.random.default_rng()
    rng_imp, rng_sem, rng_se = rng.spawn(3)
    if ds.n < 2:
        raise DataError(f"{ds.n} subject(s) are insufficient to estimate the AR(1) covariance")
    if ds.covariates_complete():
        completed = [np.asarray(ds.x)]
    else:
        completed = multiple_impute(ds, method, m, rng_imp, k0)
    streams = rng_sem.spawn(len(completed))
    if jobs == 1:
        runs = [_one_chain(ds, x, config, s) for x, s in zip(completed, streams)]
    else:
        runs = Parallel(n_jobs=jobs)(delayed(_one_chain)(ds, x, config, s) for x, s in zip(completed, streams))
    ok = [(i, r) for i, r in enumerate(runs) if not isinstance(r, Exception)]
    n_failed = len(runs) - len(ok)
    if len(ok) < len(runs) / 2 or not ok:
        raise DataError(
            f"only {len(ok)} of {len(runs)} imputation-level SEM runs succeeded; "
            f"first error: {next(r for r in runs if isinstance(r, Exception))}"
        )
    theta_hat, psi_hat = pool_mi([(th, ps) for _, (_, th, ps) in ok])
    chains = tuple(ch for _, (ch, _, _) in ok)
    names = tuple(param_names(ds.k, psi_hat is not None))
    se = pv = information = None
    se_error = None
    if compute_se:
        first = ds.with_covariates(completed[ok[0][0]])
        information = monte_carlo_information(theta_hat, psi_hat, first, m_se, rng_se, config.max_reject)
        try:
            se, pv = standard_errors(information.info, pack_params(theta_hat, psi_hat))
        except DefinitenessError as exc:
            se_error = str(exc)
            log.warning("standard errors unavailable: %s", exc)
            se = np.full(len(names), np.nan)
            pv = np.full(len(names), np.nan)
    return FitResult(theta_hat, psi_hat, se, pv, len(ok), names, chains, n_failed, information, se_error)
