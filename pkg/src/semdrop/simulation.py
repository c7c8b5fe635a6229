"""Simulation design, missingness mechanisms and the replication study.

Random streams: replication ``r`` uses ``SeedSequence(seed, spawn_key=(r,))``
whose four children drive, in order, data generation, response dropout,
covariate masking and the fit.  Results therefore do not depend on the
number of worker processes.
"""

from __future__ import annotations

import io
import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .data import (
    CovariateMissingnessParams,
    DropoutParams,
    LongitudinalDataset,
    ResponseModelParams,
    ar1_covariance,
    format_float,
)
from .errors import ContractError, DomainError, HarnessError, SemDropError
from .estimate import fit
from .imputation import DEFAULT_K0
from .sem import SemConfig, dropout_probability

log = logging.getLogger(__name__)

SIM_METHODS = ("regression", "pmm", "complete-covariates")
# display order of the published tables
TABLE_COLUMNS = [("beta0", "β0"), ("beta1", "β1"), ("rho", "ρ"), ("sigma", "σ"),
                 ("psi0", "Ψ0"), ("psi1", "Ψ1"), ("psi2", "Ψ2")]
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class SimDesign:
    n: int = 25
    t: int = 5
    beta: tuple = (5.0, 10.0)
    sigma: float = 6.0
    rho: float = 0.7
    psi: tuple = (-17.0, 0.11, 0.13)
    eta: tuple = (-5.0, 0.06)
    m: int = 10
    replications: int = 2000
    method: str = "regression"
    mar_literal: bool = False
    k0: int = DEFAULT_K0
    sem: SemConfig = field(default_factory=SemConfig)
    compute_se: bool = False
    m_se: int = 200

    def __post_init__(self):
        if self.method not in SIM_METHODS:
            raise ContractError(f"method must be one of {SIM_METHODS}")
        if self.n < 2 or self.t < 1 or self.replications < 1 or self.m < 1:
            raise ContractError("n >= 2, t >= 1, replications >= 1 and m >= 1 are required")
        ResponseModelParams(self.beta, self.sigma, self.rho)
        DropoutParams(*self.psi)
        CovariateMissingnessParams(*self.eta)

    @property
    def theta(self) -> ResponseModelParams:
        return ResponseModelParams(self.beta, self.sigma, self.rho)

    @property
    def truth(self) -> dict:
        out = {f"beta{i}": b for i, b in enumerate(self.beta)}
        out.update(sigma=self.sigma, rho=self.rho, psi0=self.psi[0], psi1=self.psi[1], psi2=self.psi[2])
        return out


def generate_complete(design: SimDesign, rng) -> LongitudinalDataset:
    """x_i ~ N(0,1), AR(1) errors, y_ij = beta0 + beta1 x_i + e_ij (fully observed)."""
    n, t = design.n, design.t
    k = len(design.beta) - 1
    x = rng.standard_normal((n, k))
    chol = np.linalg.cholesky(ar1_covariance(design.sigma, design.rho, t))
    eps = rng.standard_normal((n, t)) @ chol.T
    mu = design.beta[0] + x @ np.asarray(design.beta[1:])
    y = mu[:, None] + eps
    return LongitudinalDataset(y, x, np.ones((n, t), bool), np.ones((n, k), bool))


def apply_response_dropout(ds: LongitudinalDataset, psi: DropoutParams, rng) -> LongitudinalDataset:
    """Drop a subject at the first occasion j >= 2 where U_j < P(y_j, y_{j-1})."""
    if not ds.response_complete():
        raise ContractError("dropout is applied to a complete response")
    n, t = ds.n, ds.t
    if t == 1:
        return ds
    u = rng.random((n, t - 1))
    with np.errstate(over="ignore"):
        prob = dropout_probability(ds.y[:, 1:], ds.y[:, :-1], psi)
    hit = u < prob
    first = np.where(hit.any(axis=1), np.argmax(hit, axis=1) + 2, t + 1)
    mask = np.arange(1, t + 1)[None, :] < first[:, None]
    return ds.with_masks(y_mask=mask)


def apply_covariate_mar(ds: LongitudinalDataset, eta: CovariateMissingnessParams, rng,
                        literal: bool = False) -> LongitudinalDataset:
    """Mask each subject's covariates with probability expit(eta0 + eta1 * b_i).

    ``b_i`` is the baseline response ``y_i1``; with ``literal=True`` it is the
    previous subject's first covariate (0 for the first subject).  With several
    covariate columns only the last one is masked, which keeps the pattern
    monotone.
    """
    if not ds.covariates_complete():
        raise ContractError("covariate masking is applied to complete covariates")
    if literal:
        b = np.concatenate([[0.0], ds.x[:-1, 0]])
    else:
        b = ds.y[:, 0]
    with np.errstate(over="ignore"):
        prob = expit(eta.eta0 + eta.eta1 * b)
    miss = rng.random(ds.n) < prob
    mask = np.ones(ds.x.shape, bool)
    if ds.k:
        mask[:, -1] = ~miss
    return ds.with_masks(x_mask=mask)


def relative_bias(estimate: float, truth: float) -> float:
    if truth == 0:
        raise DomainError("relative bias is undefined for a zero true value")
    return abs(estimate - truth) / abs(truth)


@dataclass(frozen=True, eq=False)
class ReplicationReport:
    names: tuple
    truth: np.ndarray
    est: np.ndarray
    rb: np.ndarray
    n_replications: int
    n_failed: int
    n_psi_estimable: int
    estimates: np.ndarray  # successful replications x parameters (NaN psi when not estimable)
    failures: tuple = ()

    def as_rows(self):
        return {name: (self.truth[i], self.est[i], self.rb[i]) for i, name in enumerate(self.names)}

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["parameter", "true", "est", "rb"])
        for i, name in enumerate(self.names):
            w.writerow([name, format_float(self.truth[i]), format_float(self.est[i]), format_float(self.rb[i])])
        w.writerow(["replications", self.n_replications, "", ""])
        w.writerow(["failed", self.n_failed, "", ""])
        w.writerow(["psi_estimable", self.n_psi_estimable, "", ""])
        return out.getvalue()

    def to_text(self, title: str = "") -> str:
        idx = {name: i for i, name in enumerate(self.names)}
        cols = [(key, label) for key, label in TABLE_COLUMNS if key in idx]
        extra = [(name, name) for name in self.names if name not in dict(cols)]
        cols = cols[:2] + extra + cols[2:]

        def cell(v, digits):
            return "NA" if not math.isfinite(v) else f"{v:.{digits}f}"

        rows = [
            ("True parameter", [cell(self.truth[idx[k]], 3) for k, _ in cols]),
            ("Est.", [cell(self.est[idx[k]], 3) for k, _ in cols]),
            ("RB", [cell(self.rb[idx[k]], 4) for k, _ in cols]),
        ]
        width = max(9, *(len(v) for _, vals in rows for v in vals))
        lines = [title] if title else []
        lines.append(" " * 16 + "".join(f"{label:>{width + 1}}" for _, label in cols))
        for head, vals in rows:
            lines.append(f"{head:<16}" + "".join(f"{v:>{width + 1}}" for v in vals))
        lines.append(
            f"replications: {self.n_replications}  failed: {self.n_failed}  "
            f"dropout model estimable: {self.n_psi_estimable}"
        )
        return "\n".join(lines) + "\n"


def replication_streams(seed: int, rep: int):
    ss = np.random.SeedSequence(seed, spawn_key=(rep,))
    return [np.random.default_rng(child) for child in ss.spawn(4)]


def simulate_dataset(design: SimDesign, seed: int, rep: int):
    """The observed dataset of replication ``rep`` plus the fit stream."""
    g_data, g_drop, g_mar, g_fit = replication_streams(seed, rep)
    ds = generate_complete(design, g_data)
    ds = apply_response_dropout(ds, DropoutParams(*design.psi), g_drop)
    if design.method != "complete-covariates":
        ds = apply_covariate_mar(ds, CovariateMissingnessParams(*design.eta), g_mar, design.mar_literal)
    return ds, g_fit


def run_replication(design: SimDesign, seed: int, rep: int):
    """Estimates vector for one replication, or the error message on failure."""
    ds, g_fit = simulate_dataset(design, seed, rep)
    method = "regression" if design.method == "complete-covariates" else design.method
    try:
        res = fit(ds, method, design.m, design.sem, g_fit, k0=design.k0,
                  m_se=design.m_se, compute_se=design.compute_se)
    except SemDropError as exc:
        return f"replication {rep}: {type(exc).__name__}: {exc}"
    est = np.full(len(design.beta) + 5, np.nan)
    est[: len(design.beta) + 2] = res.theta_hat.vector()
    if res.psi_hat is not None:
        est[-3:] = res.psi_hat.vector()
    return est


def run_replications(design: SimDesign, seed: int = 0, jobs: int = 1) -> ReplicationReport:
    reps = range(design.replications)
    if jobs == 1:
        results = [run_replication(design, seed, r) for r in reps]
    else:
        results = Parallel(n_jobs=jobs)(delayed(run_replication)(design, seed, r) for r in reps)
    failures = tuple(r for r in results if isinstance(r, str))
    good = np.array([r for r in results if not isinstance(r, str)]).reshape(-1, len(design.beta) + 5)
    names = tuple([f"beta{i}" for i in range(len(design.beta))] + ["sigma", "rho", "psi0", "psi1", "psi2"])
    truth = np.array([design.truth[nm] for nm in names])
    psi_ok = np.isfinite(good[:, -1])
    est = np.full(len(names), np.nan)
    if good.shape[0]:
        est[:-3] = good[:, :-3].mean(axis=0)
    if psi_ok.any():
        est[-3:] = good[psi_ok, -3:].mean(axis=0)
    # RB is undefined (reported as NA) for a zero true value or a missing Est
    rb = np.array([relative_bias(e, tr) if math.isfinite(e) and tr != 0 else np.nan for e, tr in zip(est, truth)])
    report = ReplicationReport(names, truth, est, rb, design.replications, len(failures),
                               int(psi_ok.sum()), good, failures)
    if len(failures) > MAX_FAILURE_RATE * design.replications:
        raise HarnessError(
            f"{len(failures)} of {design.replications} replications failed; first: {failures[0]}",
            report=report,
        )
    return report


def with_overrides(design: SimDesign, **kw) -> SimDesign:
    return replace(design, **{k: v for k, v in kw.items() if v is not None})


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    """Estimates and Louis SEs over repeated fits of one design."""

    names: tuple
    estimates: np.ndarray  # fits x parameters
    se: np.ndarray  # NaN rows where the information matrix was not positive definite
    attempts: int
    failures: tuple

    @property
    def empirical_sd(self) -> np.ndarray:
        return self.estimates.std(axis=0, ddof=1)

    @property
    def median_se(self) -> np.ndarray:
        return np.nanmedian(self.se, axis=0)

    @property
    def ratio(self) -> np.ndarray:
        return self.median_se / self.empirical_sd


def _calibration_fit(design: SimDesign, seed: int, rep: int):
    ds, g_fit = simulate_dataset(design, seed, rep)
    method = "regression" if design.method == "complete-covariates" else design.method
    try:
        res = fit(ds, method, design.m, design.sem, g_fit, k0=design.k0, m_se=design.m_se)
    except SemDropError as exc:
        return f"replication {rep}: {type(exc).__name__}: {exc}"
    if res.psi_hat is None:
        return f"replication {rep}: dropout model not estimable"
    return res.estimates, res.se


def se_calibration(design: SimDesign, n_fits: int, seed: int = 0, jobs: int = 1,
                   max_attempts: int | None = None) -> CalibrationReport:
    """Fit replications ``0, 1, ...`` until ``n_fits`` succeed.

    Failed fits (separation, non-convergence, an unestimable dropout model)
    are skipped and counted; ``max_attempts`` (default ``2 * n_fits``) bounds
    the search.
    """
    max_attempts = 2 * n_fits if max_attempts is None else max_attempts
    good, failures = [], []
    rep = 0
    while len(good) < n_fits and rep < max_attempts:
        batch = range(rep, min(rep + n_fits - len(good), max_attempts))
        if jobs == 1:
            out = [_calibration_fit(design, seed, r) for r in batch]
        else:
            out = Parallel(n_jobs=jobs)(delayed(_calibration_fit)(design, seed, r) for r in batch)
        for r in out:
            (failures if isinstance(r, str) else good).append(r)
        rep = batch.stop
    if len(good) < n_fits:
        raise HarnessError(f"only {len(good)} of {rep} fits succeeded; first failure: {failures[0]}")
    names = tuple([f"beta{i}" for i in range(len(design.beta))] + ["sigma", "rho", "psi0", "psi1", "psi2"])
    est = np.array([e for e, _ in good])
    se = np.array([s for _, s in good])
    return CalibrationReport(names, est, se, rep, tuple(failures))
