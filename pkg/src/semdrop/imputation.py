"""Multiple imputation of monotone-missing cross-sectional covariates.

Two methods share the same posterior draw of the imputation regression:
``regression`` imputes the drawn prediction plus Gaussian noise, ``pmm``
(predictive mean matching) imputes an observed donor value.

Each covariate column ``c`` is imputed from the baseline response ``y_1``
and covariate columns ``0..c-1`` (observed or already imputed), in column
order.  The monotone mask guarantees those predictors are observed on every
row where column ``c`` is observed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset, design_matrix
from .errors import ContractError, DataError, DegenerateFitError, FitError, NumericError

METHODS = ("regression", "pmm")
DEFAULT_K0 = 5


@dataclass(frozen=True, eq=False)
class ImputationFit:
    beta_hat: np.ndarray
    sigma2_hat: float
    v: np.ndarray
    n_obs: int
    df: int


@dataclass(frozen=True, eq=False)
class PosteriorDraw:
    beta_star: np.ndarray
    sigma2_star: float


def fit_imputation_model(target, predictors, observed=None) -> ImputationFit:
    """OLS of ``target`` on an intercept plus ``predictors`` over observed rows.

    ``v`` is ``(X'X)^{-1}`` so that the coefficient covariance is ``sigma2 * v``.
    """
    target = np.asarray(target, dtype=float)
    predictors = np.asarray(predictors, dtype=float)
    if predictors.ndim == 1:
        predictors = predictors[:, None]
    if predictors.shape[0] != target.shape[0]:
        raise ContractError("target and predictors must have the same number of rows")
    if observed is None:
        observed = ~np.isnan(target)
    observed = np.asarray(observed, dtype=bool)
    X = design_matrix(predictors[observed])
    yo = target[observed]
    n_obs, p = X.shape
    if n_obs < p + 1:
        raise DataError(f"imputation model needs at least {p + 1} complete cases, got {n_obs}")
    if not np.isfinite(X).all():
        raise ContractError("predictors must be observed on the fitting rows")
    if np.linalg.matrix_rank(X) < p:
        raise FitError("imputation predictors are rank deficient on the complete cases")
    beta_hat, *_ = np.linalg.lstsq(X, yo, rcond=None)
    resid = yo - X @ beta_hat
    df = n_obs - p
    sigma2 = float(resid @ resid) / df
    if sigma2 <= 1e-20 * max(1.0, float(np.mean(yo**2))):
        raise DegenerateFitError("imputation regression fits the observed target exactly")
    xtx = X.T @ X
    try:
        chol = np.linalg.cholesky(xtx)
    except np.linalg.LinAlgError as exc:
        raise FitError("X'X is not positive definite") from exc
    inv_chol = np.linalg.inv(chol)
    v = inv_chol.T @ inv_chol
    return ImputationFit(beta_hat, sigma2, 0.5 * (v + v.T), n_obs, df)


def draw_posterior(fit: ImputationFit, rng, *, g=None, z=None) -> PosteriorDraw:
    """Posterior draw of (beta, sigma^2); ``g`` then ``z`` are drawn in that order.

    ``g`` (chi-square variate) and ``z`` (standard normals) can be forced.
    """
    if g is None:
        g = rng.chisquare(fit.df)
    sigma2_star = fit.sigma2_hat * fit.df / g
    if z is None:
        z = rng.standard_normal(fit.beta_hat.size)
    try:
        lower = np.linalg.cholesky(fit.v)  # V = U'U with U = lower.T
    except np.linalg.LinAlgError as exc:
        raise NumericError("Cholesky factorisation of V failed") from exc
    beta_star = fit.beta_hat + np.sqrt(sigma2_star) * (lower @ np.asarray(z, dtype=float))
    return PosteriorDraw(beta_star, float(sigma2_star))


def impute_regression(draw: PosteriorDraw, predictors, rng, *, z=None) -> np.ndarray:
    """Drawn prediction plus ``N(0, sigma2_star)`` noise for each missing row."""
    X = design_matrix(predictors)
    if z is None:
        z = rng.standard_normal(X.shape[0])
    return X @ draw.beta_star + np.asarray(z, dtype=float) * np.sqrt(draw.sigma2_star)


def impute_pmm(fit: ImputationFit, draw: PosteriorDraw, predictors_missing, predictors_observed,
               target_observed, k0: int, rng) -> np.ndarray:
    """Predictive mean matching.

    Donor predictions use the point estimate ``beta_hat``; the recipient's
    prediction uses the posterior draw.  Ties in distance go to the lowest
    donor index.
    """
    target_observed = np.asarray(target_observed, dtype=float)
    if not 1 <= k0 <= target_observed.size:
        raise DataError(f"donor pool of {target_observed.size} cannot supply k0={k0} donors")
    donor_pred = design_matrix(predictors_observed) @ fit.beta_hat
    recip_pred = design_matrix(predictors_missing) @ draw.beta_star
    dist = np.abs(recip_pred[:, None] - donor_pred[None, :])
    pool = np.argsort(dist, axis=1, kind="stable")[:, :k0]
    pick = rng.integers(0, k0, size=pool.shape[0])
    return target_observed[pool[np.arange(pool.shape[0]), pick]]


def impute_once(ds: LongitudinalDataset, method: str, rng, k0: int = DEFAULT_K0) -> np.ndarray:
    """One completed covariate matrix (observed cells untouched)."""
    if method not in METHODS:
        raise ContractError(f"unknown imputation method {method!r}")
    x = np.array(ds.x, dtype=float)
    baseline = ds.y[:, 0]
    for c in range(ds.k):
        miss = ~ds.x_mask[:, c]
        if not miss.any():
            continue
        obs = ~miss
        preds = np.column_stack([baseline, x[:, :c]])
        fit = fit_imputation_model(x[:, c], preds, observed=obs)
        draw = draw_posterior(fit, rng)
        if method == "regression":
            vals = impute_regression(draw, preds[miss], rng)
        else:
            vals = impute_pmm(fit, draw, preds[miss], preds[obs], x[obs, c], k0, rng)
        x[miss, c] = vals
    return x


def multiple_impute(ds: LongitudinalDataset, method: str, m: int, rng, k0: int = DEFAULT_K0):
    """``m`` completed covariate matrices, imputation ``j`` driven by child stream ``j``."""
    if m < 1:
        raise ContractError("m must be at least 1")
    streams = rng.spawn(m)
    return [impute_once(ds, method, s, k0) for s in streams]
