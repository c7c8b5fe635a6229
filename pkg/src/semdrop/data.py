"""Core data types, mask semantics, AR(1) covariance and Gaussian helpers.

Response occasions and dropout times are 1-based throughout the public API:
``dropout_time`` returns the first unobserved occasion ``d`` in ``2..t``.
Vectorised code encodes a complete subject as ``d = t + 1``.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    DatasetFormatError,
    DomainError,
    NumericError,
    PatternError,
)

LOG_2PI = math.log(2.0 * math.pi)
NA_TOKEN = "NA"
PIVOT_RTOL = 1e-12


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Subjects-by-occasions response matrix plus cross-sectional covariates.

    Cells where a mask is false are stored as NaN and never read.
    """

    y: np.ndarray
    x: np.ndarray
    y_mask: np.ndarray
    x_mask: np.ndarray
    ids: tuple = field(default=())

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        ym = np.asarray(self.y_mask, dtype=bool)
        xm = np.asarray(self.x_mask, dtype=bool)
        if xm.ndim == 1:
            xm = xm[:, None]
        if ym.shape != y.shape:
            raise ContractError(f"y_mask shape {ym.shape} != y shape {y.shape}")
        if x.shape[0] != y.shape[0] or xm.shape != x.shape:
            raise ContractError("covariate matrix/mask shapes inconsistent with y")
        if y.shape[1] < 1:
            raise ContractError("need at least one occasion")
        check_monotone(ym, what="response")
        if not ym[:, 0].all():
            bad = int(np.flatnonzero(~ym[:, 0])[0])
            raise PatternError(f"subject {bad}: response must be observed at occasion 1")
        if xm.shape[1]:
            check_monotone(xm, what="covariate")
        if not np.isfinite(y[ym]).all() or not np.isfinite(x[xm]).all():
            raise ContractError("observed cells must be finite")
        y = np.where(ym, y, np.nan)
        x = np.where(xm, x, np.nan)
        ids = tuple(self.ids) if len(self.ids) else tuple(str(i + 1) for i in range(y.shape[0]))
        if len(ids) != y.shape[0]:
            raise ContractError("ids length must equal subject count")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y_mask", _frozen(ym, bool))
        object.__setattr__(self, "x_mask", _frozen(xm, bool))
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def t(self) -> int:
        return self.y.shape[1]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def dropout(self) -> np.ndarray:
        """Per-subject first unobserved occasion, ``t + 1`` when complete."""
        return self.y_mask.sum(axis=1) + 1

    def covariates_complete(self) -> bool:
        return bool(self.x_mask.all())

    def response_complete(self) -> bool:
        return bool(self.y_mask.all())

    def with_covariates(self, x) -> "LongitudinalDataset":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return LongitudinalDataset(self.y, x, self.y_mask, np.ones(x.shape, bool), self.ids)

    def with_masks(self, y_mask=None, x_mask=None) -> "LongitudinalDataset":
        """Return a copy with different masks; values under the new masks must exist."""
        ym = self.y_mask if y_mask is None else y_mask
        xm = self.x_mask if x_mask is None else x_mask
        return LongitudinalDataset(self.y, self.x, ym, xm, self.ids)


@dataclass(frozen=True, eq=False)
class PseudoComplete:
    """Fully filled response rows together with the observed dropout times."""

    y: np.ndarray
    x: np.ndarray
    dropout: np.ndarray

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise ContractError("pseudo-complete data must be fully filled")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "dropout", _frozen(self.dropout, int))

    @classmethod
    def from_dataset(cls, ds: LongitudinalDataset, y_full=None) -> "PseudoComplete":
        return cls(ds.y if y_full is None else y_full, ds.x, ds.dropout)


@dataclass(frozen=True)
class ResponseModelParams:
    beta: tuple
    sigma: float
    rho: float

    def __post_init__(self):
        beta = tuple(float(b) for b in np.atleast_1d(self.beta))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "rho", float(self.rho))
        if not all(math.isfinite(b) for b in beta):
            raise DomainError("beta must be finite")
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not abs(self.rho) < 1:
            raise DomainError(f"|rho| must be < 1, got {self.rho}")

    def vector(self) -> np.ndarray:
        return np.array([*self.beta, self.sigma, self.rho])

    @classmethod
    def from_vector(cls, v) -> "ResponseModelParams":
        v = np.asarray(v, dtype=float)
        return cls(tuple(v[:-2]), v[-2], v[-1])


@dataclass(frozen=True)
class DropoutParams:
    """Logit coefficients: intercept, current occasion value, previous value."""

    psi0: float
    psi1: float
    psi2: float

    def __post_init__(self):
        for name in ("psi0", "psi1", "psi2"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise DomainError(f"{name} must be finite")
            object.__setattr__(self, name, val)

    def vector(self) -> np.ndarray:
        return np.array([self.psi0, self.psi1, self.psi2])

    @classmethod
    def from_vector(cls, v) -> "DropoutParams":
        a, b, c = np.asarray(v, dtype=float)
        return cls(a, b, c)


@dataclass(frozen=True)
class CovariateMissingnessParams:
    eta0: float
    eta1: float

    def __post_init__(self):
        for name in ("eta0", "eta1"):
            val = float(getattr(self, name))
            if math.isnan(val):
                raise DomainError(f"{name} must not be NaN")
            object.__setattr__(self, name, val)


def ar1_covariance(sigma: float, rho: float, t: int) -> np.ndarray:
    """``t`` x ``t`` matrix with entries ``sigma**2 * rho**|i-j|``."""
    if not (sigma > 0 and math.isfinite(sigma)):
        raise DomainError(f"sigma must be positive, got {sigma}")
    if not abs(rho) < 1:
        raise DomainError(f"|rho| must be < 1, got {rho}")
    if int(t) != t or t < 1:
        raise DomainError(f"t must be a positive integer, got {t}")
    lag = np.abs(np.subtract.outer(np.arange(t), np.arange(t)))
    return sigma**2 * np.power(float(rho), lag)


def check_monotone(mask, what="response"):
    """Raise PatternError unless each row is a run of True followed by False."""
    mask = np.asarray(mask, dtype=bool)
    bad = (~mask[:, :-1]) & mask[:, 1:]
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise PatternError(
            f"subject {row}: {what} observed at position {col + 2} after a missing value; "
            "only monotone (dropout) patterns are supported, intermittent missingness is not"
        )


def dropout_time(mask):
    """First unobserved occasion (1-based) or None when the row is complete."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1 or mask.size == 0:
        raise ContractError("mask must be a non-empty vector")
    check_monotone(mask[None, :])
    if not mask[0]:
        raise PatternError("response must be observed at occasion 1")
    if mask.all():
        return None
    return int(np.argmin(mask)) + 1


def mask_from_dropout(d, t: int) -> np.ndarray:
    """Inverse of :func:`dropout_time` (``None`` means complete)."""
    if d is None:
        return np.ones(t, dtype=bool)
    if not 2 <= d <= t:
        raise DomainError(f"dropout time must lie in 2..{t}, got {d}")
    return np.arange(1, t + 1) < d


def cholesky_checked(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; rejects pivots below 1e-12 x the largest diagonal."""
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError("matrix is not positive definite") from exc
    pivots = np.diag(chol) ** 2
    if pivots.min() < PIVOT_RTOL * np.max(np.diag(a)):
        raise NumericError("matrix is numerically singular (Cholesky pivot below threshold)")
    return chol


def conditional_regression(cov, observed, missing):
    """Coefficients ``A`` and covariance ``S`` with E[y_m|y_o] = mu_m + A (y_o - mu_o)."""
    cov = np.asarray(cov, dtype=float)
    observed = np.asarray(observed, dtype=int)
    missing = np.asarray(missing, dtype=int)
    chol = cholesky_checked(cov[np.ix_(observed, observed)])
    cross = cov[np.ix_(observed, missing)]
    # solve S_oo^{-1} S_om with two triangular solves
    half = np.linalg.solve(chol, cross)
    coef = np.linalg.solve(chol.T, half).T
    cond_cov = cov[np.ix_(missing, missing)] - half.T @ half
    return coef, 0.5 * (cond_cov + cond_cov.T)


def conditional_normal(mean, cov, observed_indices, observed_values):
    """Gaussian conditional moments of the unobserved block.

    ``observed_values`` may carry leading batch dimensions; the returned mean
    then has the same leading shape.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    t = mean.shape[-1]
    obs = np.asarray(observed_indices, dtype=int).ravel()
    if obs.size == 0 or obs.size >= t or len(set(obs.tolist())) != obs.size:
        raise ContractError("observed indices must be a non-empty proper subset")
    if obs.min() < 0 or obs.max() >= t:
        raise ContractError("observed index out of range")
    mis = np.setdiff1d(np.arange(t), obs)
    coef, cond_cov = conditional_regression(cov, obs, mis)
    vals = np.asarray(observed_values, dtype=float)
    cond_mean = mean[..., mis] + (vals - mean[..., obs]) @ coef.T
    return cond_mean, cond_cov


def design_matrix(x) -> np.ndarray:
    """Prepend the intercept column to cross-sectional covariates."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(x.shape[0]), x])


def mvn_loglik(y_rows, design, params: ResponseModelParams) -> float:
    """Sum of MVN log densities with mean ``beta0 + x'beta`` repeated over occasions."""
    y = np.atleast_2d(np.asarray(y_rows, dtype=float))
    if not np.isfinite(y).all():
        raise ContractError("mvn_loglik requires complete rows")
    z = design_matrix(design)
    beta = np.asarray(params.beta)
    if z.shape[1] != beta.size or z.shape[0] != y.shape[0]:
        raise ContractError("design dimensions do not match beta / response rows")
    n, t = y.shape
    cov = ar1_covariance(params.sigma, params.rho, t)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is not positive definite") from exc
    resid = y - (z @ beta)[:, None]
    white = np.linalg.solve(chol, resid.T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (n * (t * LOG_2PI + logdet) + np.sum(white**2)))


# ---------------------------------------------------------------------------
# CSV format: id, x_1..x_k, y_1..y_t ; missing cells are the literal token NA


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_float(v) -> str:
    v = float(v)
    return NA_TOKEN if not math.isfinite(v) else repr(v)


def _parse_header(header):
    if not header or header[0].strip().lower() != "id":
        raise DatasetFormatError("row 1, column 1: header must start with 'id'")
    xcols, ycols = [], []
    for j, name in enumerate(header[1:], start=2):
        name = name.strip()
        if name.startswith("x_"):
            if ycols:
                raise DatasetFormatError(f"row 1, column {j}: covariate column after response columns")
            xcols.append(name)
        elif name.startswith("y_"):
            ycols.append(name)
        else:
            raise DatasetFormatError(f"row 1, column {j}: unrecognised column name {name!r}")
    if not ycols:
        raise DatasetFormatError("row 1: no response columns (y_1..y_t)")
    expect_x = [f"x_{i}" for i in range(1, len(xcols) + 1)]
    expect_y = [f"y_{i}" for i in range(1, len(ycols) + 1)]
    if xcols != expect_x or ycols != expect_y:
        raise DatasetFormatError("row 1: columns must be numbered x_1..x_k, y_1..y_t in order")
    return len(xcols), len(ycols)


def parse_dataset(text: str) -> LongitudinalDataset:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DatasetFormatError("row 1: empty file, header row required")
    k, t = _parse_header(rows[0])
    width = 1 + k + t
    ids, vals = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise DatasetFormatError(f"row {i}: expected {width} fields, found {len(row)}")
        ids.append(row[0].strip())
        parsed = []
        for j, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if cell == NA_TOKEN:
                parsed.append(np.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DatasetFormatError(
                    f"row {i}, column {j} ({rows[0][j - 1].strip()}): cannot parse {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise DatasetFormatError(f"row {i}, column {j}: non-finite value {cell!r}")
            parsed.append(v)
        vals.append(parsed)
    if not vals:
        raise DatasetFormatError("no subject rows after the header")
    arr = np.array(vals, dtype=float)
    x, y = arr[:, :k], arr[:, k:]
    return LongitudinalDataset(y, x, ~np.isnan(y), ~np.isnan(x), tuple(ids))


def read_dataset(path) -> LongitudinalDataset:
    return parse_dataset(Path(path).read_text())


def dataset_to_csv(ds: LongitudinalDataset) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["id", *[f"x_{i}" for i in range(1, ds.k + 1)], *[f"y_{j}" for j in range(1, ds.t + 1)]])
    x = np.where(ds.x_mask, ds.x, np.nan)
    y = np.where(ds.y_mask, ds.y, np.nan)
    for i in range(ds.n):
        writer.writerow([ds.ids[i], *map(format_float, x[i]), *map(format_float, y[i])])
    return out.getvalue()


def write_dataset(ds: LongitudinalDataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


def ar1_quadratic_parts(resid):
    """Sums of squares, lag-1 products and interior squares over subjects/occasions.

    With ``N = s0 - 2 rho s1 + rho^2 s2`` the AR(1) quadratic form is
    ``sum_i r_i' R^{-1} r_i = N / (1 - rho^2)`` for ``t >= 2``.
    """
    s0 = np.sum(resid**2, axis=(-2, -1))
    s1 = np.sum(resid[..., 1:] * resid[..., :-1], axis=(-2, -1))
    s2 = np.sum(resid[..., 1:-1] ** 2, axis=(-2, -1))
    return s0, s1, s2


def ar1_loglik_batch(y, x, beta, sigma, rho):
    """Closed-form AR(1) Gaussian log-likelihood for a batch of parameter sets.

    ``beta`` has shape (N, k+1), ``sigma`` and ``rho`` shape (N,).  For
    ``t == 1`` only ``rho == 0`` is meaningful.
    """
    y = np.asarray(y, dtype=float)
    z = design_matrix(x)
    beta = np.atleast_2d(beta)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    n, t = y.shape
    mu = beta @ z.T  # (N, n)
    resid = y[None, :, :] - mu[:, :, None]
    s0, s1, s2 = ar1_quadratic_parts(resid)
    if t == 1:
        quad = s0
        logdet_r = np.zeros_like(rho)
    else:
        one_m = 1.0 - rho**2
        quad = (s0 - 2.0 * rho * s1 + rho**2 * s2) / one_m
        logdet_r = (t - 1) * np.log(one_m)
    return -0.5 * (n * t * LOG_2PI + n * (2 * t * np.log(sigma) + logdet_r) + quad / sigma**2)
