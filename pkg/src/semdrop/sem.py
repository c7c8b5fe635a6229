"""Stochastic EM for the Diggle-Kenward selection model with monotone dropout.

One iteration:

* S-step: for every dropout subject draw the value at its dropout occasion
  by accept-reject (candidate from the Gaussian conditional on the history,
  accepted with the dropout probability), then fill later occasions from the
  Gaussian conditional given occasions ``1..d``.
* M1: logistic MLE of the dropout parameters on the at-risk rows.
* M2: Newton-Raphson MLE of (beta, sigma, rho) on the filled rows.

Point estimates average the chain after burn-in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import linprog
from scipy.special import expit, logit

from .data import (
    LongitudinalDataset,
    PseudoComplete,
    DropoutParams,
    ResponseModelParams,
    ar1_covariance,
    ar1_quadratic_parts,
    cholesky_checked,
    design_matrix,
)
from .errors import (
    ContractError,
    DataError,
    NonConvergenceError,
    NumericError,
    OptimizationError,
    SamplerStallError,
    SemDropError,
    SeparationError,
)

log = logging.getLogger(__name__)

MAX_CHUNK = 4096
EXTREME_LOGIT = 30.0


@dataclass(frozen=True)
class SemConfig:
    n_iterations: int = 500
    burn_in: int = 100
    m2_tolerance: float = 1e-6
    m2_max_iter: int = 50
    max_reject: int = 100_000
    m1_tolerance: float = 1e-8
    m1_max_iter: int = 50

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iterations:
            raise ContractError("need 0 <= burn_in < n_iterations")
        if not (self.m2_tolerance > 0 and self.m1_tolerance > 0):
            raise ContractError("tolerances must be positive")
        if self.max_reject < 1 or self.m2_max_iter < 1 or self.m1_max_iter < 1:
            raise ContractError("iteration caps must be positive")


@dataclass(frozen=True, eq=False)
class SemChain:
    """Per-iteration parameter records.

    ``theta`` rows are ``(beta_0..beta_k, sigma, rho)``; ``psi`` rows are NaN
    when the dropout model is not estimable from the observed pattern.
    ``attempts`` counts accept-reject candidates per iteration.
    """

    theta: np.ndarray
    psi: np.ndarray
    attempts: np.ndarray
    burn_in: int

    @property
    def n_iterations(self) -> int:
        return self.theta.shape[0]

    def point_estimates(self):
        seg = slice(self.burn_in, None)
        theta = ResponseModelParams.from_vector(self.theta[seg].mean(axis=0))
        psi_mean = self.psi[seg].mean(axis=0)
        psi = DropoutParams.from_vector(psi_mean) if np.isfinite(psi_mean).all() else None
        return theta, psi

    def acceptance_rate(self, n_dropouts: int) -> float:
        total = int(self.attempts.sum())
        return float("nan") if total == 0 else n_dropouts * self.n_iterations / total


def dropout_probability(y_current, y_previous, psi: DropoutParams):
    return expit(psi.psi0 + psi.psi1 * np.asarray(y_current) + psi.psi2 * np.asarray(y_previous))


def dropout_design(y_full, dropout):
    """At-risk rows ``(1, y_j, y_{j-1})`` for occasions ``j = 2..min(d, t)``.

    The outcome is 1 at the dropout occasion and 0 at survived occasions.
    Rows are ordered by subject then occasion.
    """
    y_full = np.asarray(y_full, dtype=float)
    dropout = np.asarray(dropout)
    t = y_full.shape[1]
    occ = np.arange(2, t + 1)
    at_risk = occ[None, :] <= dropout[:, None]
    event = (occ[None, :] == dropout[:, None])[at_risk]
    X = np.column_stack([np.ones(event.size), y_full[:, 1:][at_risk], y_full[:, :-1][at_risk]])
    return X, event.astype(float)


def dropout_loglik(X, outcome, psi_vec) -> float:
    eta = X @ np.asarray(psi_vec, dtype=float)
    return float(outcome @ eta - np.logaddexp(0.0, eta).sum())


# --------------------------------------------------------------------------- S-step


def _accept_reject(cond_mean, cond_sd, y_prev, psi, rng, max_reject, subjects):
    """Vectorised rejection sampler; every pending subject consumes the same chunk."""
    m = cond_mean.size
    out = np.empty(m)
    attempts = np.zeros(m, dtype=np.int64)
    psum = np.zeros(m)
    pending = np.arange(m)
    chunk = 8
    used = 0
    while pending.size:
        c = min(chunk, max_reject - used)
        z = rng.standard_normal((pending.size, c))
        u = rng.random((pending.size, c))
        cand = cond_mean[pending, None] + cond_sd * z
        prob = expit(psi.psi0 + psi.psi1 * cand + psi.psi2 * y_prev[pending, None])
        acc = u <= prob
        hit = acc.any(axis=1)
        first = np.argmax(acc, axis=1)
        done = pending[hit]
        out[done] = cand[hit, first[hit]]
        attempts[done] = used + first[hit] + 1
        psum[pending[~hit]] += prob[~hit].sum(axis=1)
        pending = pending[~hit]
        used += c
        if pending.size and used >= max_reject:
            worst = pending[0]
            est = psum[worst] / used
            raise SamplerStallError(
                f"accept-reject exceeded {max_reject} attempts for subject {subjects[worst]} "
                f"(estimated acceptance rate {est:.3g})",
                acceptance_estimate=est, attempts=used, subject=int(subjects[worst]),
            )
        chunk = min(2 * chunk, MAX_CHUNK)
    return out, attempts


def s_step_batch(y, dropout, means, cov, psi, rng, max_reject=100_000):
    """Fill every incomplete row; returns ``(y_full, attempts)``.

    ``psi=None`` stands for the limit where dropout is certain (acceptance 1),
    i.e. plain Gaussian conditional draws.

    Conditioning on leading occasions uses one Cholesky factor ``L`` of
    ``cov``: with ``y = mu + L e``, the history fixes ``e_1..e_{d-1}``.
    """
    y = np.array(y, dtype=float)
    dropout = np.asarray(dropout)
    means = np.asarray(means, dtype=float)
    n, t = y.shape
    attempts = np.zeros(n, dtype=np.int64)
    if not (dropout <= t).any():
        return y, attempts
    chol = cholesky_checked(cov)
    mu_rows = np.broadcast_to(means[:, None], (n, t)) if means.ndim == 1 else means
    for d in np.unique(dropout[dropout <= t]):
        idx = np.flatnonzero(dropout == d)
        dm = int(d) - 1  # 0-based occasion of the first missing value
        mu = mu_rows[idx]
        e = np.empty((idx.size, t))
        e[:, :dm] = solve_triangular(chol[:dm, :dm], (y[idx, :dm] - mu[:, :dm]).T, lower=True).T
        cm = mu[:, dm] + e[:, :dm] @ chol[dm, :dm]
        sd = chol[dm, dm]
        if psi is None:
            y[idx, dm] = cm + sd * rng.standard_normal(idx.size)
            attempts[idx] = 1
        else:
            y[idx, dm], attempts[idx] = _accept_reject(
                cm, sd, y[idx, dm - 1], psi, rng, max_reject, idx
            )
        if dm + 1 < t:
            e[:, dm] = (y[idx, dm] - cm) / sd
            e[:, dm + 1 :] = rng.standard_normal((idx.size, t - dm - 1))
            y[idx, dm + 1 :] = mu[:, dm + 1 :] + e @ chol[dm + 1 :, :].T
    return y, attempts


def s_step(row, d, theta: ResponseModelParams, psi, rng, max_reject=100_000, covariates=()):
    """Single-subject S-step; ``d=None`` (complete) returns the row unchanged."""
    row = np.asarray(row, dtype=float)
    t = row.size
    if d is None or d == t + 1:
        return row.copy()
    if not 2 <= d <= t:
        raise ContractError(f"dropout time must lie in 2..{t}")
    mean = np.asarray(theta.beta) @ np.concatenate([[1.0], np.atleast_1d(covariates)])
    cov = ar1_covariance(theta.sigma, theta.rho, t)
    y_full, _ = s_step_batch(row[None, :], np.array([d]), np.array([mean]), cov, psi, rng, max_reject)
    return y_full[0]


# --------------------------------------------------------------------------- M1


def _is_separated(X, outcome) -> bool:
    """LP check for (quasi-)complete separation.

    Looks for a direction ``b`` with ``s_i x_i'b >= 0`` for all rows and a
    positive total, ``s_i = 2 outcome_i - 1``.
    """
    s = 2.0 * outcome - 1.0
    scale = np.maximum(np.abs(X).max(axis=0), 1e-300)
    A = (s[:, None] * X) / scale
    res = linprog(-A.sum(axis=0), A_ub=-A, b_ub=np.zeros(A.shape[0]),
                  bounds=[(-1, 1)] * X.shape[1], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-7 * A.shape[0])


def m1_logistic(X, outcome, psi_init=None, tol=1e-8, max_iter=50) -> DropoutParams:
    """IRLS (Newton for the canonical logit link) with step-halving.

    A regressor column that is identically zero carries no information; its
    coefficient is held at 0 and the others are fitted.
    """
    X = np.asarray(X, dtype=float)
    outcome = np.asarray(outcome, dtype=float)
    n_events = outcome.sum()
    if n_events == 0 or n_events == outcome.size:
        raise SeparationError(
            f"dropout model not estimable: {int(n_events)} events in {outcome.size} at-risk rows"
        )
    active = np.any(X != 0.0, axis=0)
    if not active.all():
        full = np.zeros(X.shape[1])
        init = None if psi_init is None else np.asarray(psi_init, dtype=float)[active]
        full[active] = _irls(X[:, active], outcome, init, tol, max_iter)
        return DropoutParams.from_vector(full)
    return DropoutParams.from_vector(_irls(X, outcome, psi_init, tol, max_iter))


def _irls(X, outcome, psi_init, tol, max_iter):
    # the weights are strictly positive, so X'WX is singular exactly when X is
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise NumericError("singular weighted design in the dropout logistic step")
    b = np.zeros(X.shape[1]) if psi_init is None else np.asarray(psi_init, dtype=float).copy()
    ll = dropout_loglik(X, outcome, b)
    converged = False
    for _ in range(max_iter + 1):
        p = expit(X @ b)
        score = X.T @ (outcome - p)
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        w = p * (1.0 - p)
        info = X.T @ (w[:, None] * X)
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            if _is_separated(X, outcome):
                raise SeparationError("dropout logistic data are separated") from None
            raise NumericError("singular weighted design in the dropout logistic step") from None
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, score))
        for _half in range(30):
            cand = b + step
            ll_new = dropout_loglik(X, outcome, cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        b, ll = cand, ll_new
    if not converged or np.abs(X @ b).max() > EXTREME_LOGIT:
        if _is_separated(X, outcome):
            raise SeparationError("dropout logistic data are separated; MLE does not exist")
        if not converged:
            raise NumericError(f"dropout logistic IRLS did not converge in {max_iter} iterations")
    return b


# --------------------------------------------------------------------------- M2


def _to_unconstrained(theta: ResponseModelParams) -> np.ndarray:
    return np.array([*theta.beta, np.log(theta.sigma), np.arctanh(theta.rho)])


def _from_unconstrained(u) -> ResponseModelParams:
    return ResponseModelParams(tuple(u[:-2]), np.exp(u[-2]), np.tanh(u[-1]))


def ar1_objective(u, y, z, with_derivatives=True, fit_rho=True):
    """Log-likelihood in ``(beta, log sigma, atanh rho)`` with gradient and Hessian.

    ``z`` is the design with intercept.  When ``fit_rho`` is false the last
    coordinate is held fixed and omitted from gradient/Hessian.
    """
    n, t = y.shape
    p = z.shape[1]
    beta, phi, a = u[:p], u[p], u[p + 1]
    rho = np.tanh(a)
    jac = 1.0 - rho**2
    w = np.exp(-2.0 * phi)
    r = y - (z @ beta)[:, None]
    s0, s1, s2 = ar1_quadratic_parts(r)
    if t == 1:
        c, nq = 1.0, s0
        logdet_r = 0.0
    else:
        c = 1.0 / jac
        nq = s0 - 2.0 * rho * s1 + rho**2 * s2
        logdet_r = (t - 1) * np.log(jac)
    q = c * nq
    ll = -0.5 * n * t * np.log(2 * np.pi) - n * t * phi - 0.5 * n * logdet_r - 0.5 * w * q
    if not with_derivatives:
        return ll
    # derivatives of s0, s1, s2 with respect to beta (r_ij depends on beta via -z_i)
    ds0 = -2.0 * z.T @ r.sum(axis=1)
    ds1 = -z.T @ (r[:, 1:] + r[:, :-1]).sum(axis=1)
    ds2 = -2.0 * z.T @ r[:, 1:-1].sum(axis=1)
    ztz = z.T @ z
    if t == 1:
        n_b = ds0
        n_bb = 2.0 * t * ztz
        n_r = n_rr = 0.0
        n_br = np.zeros(p)
        c_r = c_rr = 0.0
    else:
        n_b = ds0 - 2.0 * rho * ds1 + rho**2 * ds2
        n_bb = (2.0 * t - 4.0 * rho * (t - 1) + 2.0 * rho**2 * max(t - 2, 0)) * ztz
        n_r = -2.0 * s1 + 2.0 * rho * s2
        n_rr = 2.0 * s2
        n_br = -2.0 * ds1 + 2.0 * rho * ds2
        c_r = 2.0 * rho * c**2
        c_rr = 2.0 * c**2 + 8.0 * rho**2 * c**3
    q_b = c * n_b
    q_bb = c * n_bb
    q_r = c_r * nq + c * n_r
    q_rr = c_rr * nq + 2.0 * c_r * n_r + c * n_rr
    q_br = c_r * n_b + c * n_br
    q_a = q_r * jac
    q_aa = q_rr * jac**2 - 2.0 * rho * jac * q_r
    q_ba = q_br * jac

    g = np.empty(p + 2)
    g[:p] = -0.5 * w * q_b
    g[p] = -n * t + w * q
    g[p + 1] = n * (t - 1) * rho - 0.5 * w * q_a
    h = np.empty((p + 2, p + 2))
    h[:p, :p] = -0.5 * w * q_bb
    h[:p, p] = h[p, :p] = w * q_b
    h[:p, p + 1] = h[p + 1, :p] = -0.5 * w * q_ba
    h[p, p] = -2.0 * w * q
    h[p, p + 1] = h[p + 1, p] = w * q_a
    h[p + 1, p + 1] = n * (t - 1) * jac - 0.5 * w * q_aa
    if not fit_rho:
        return ll, g[:-1], h[:-1, :-1]
    return ll, g, h


def m2_normal(data: PseudoComplete, theta_init: ResponseModelParams, tol=1e-6, max_iter=50,
              fix_rho=None) -> ResponseModelParams:
    """Newton-Raphson MLE of the AR(1) normal model on pseudo-complete rows.

    Works on ``(beta, log sigma, atanh rho)`` so the result always satisfies
    ``sigma > 0`` and ``|rho| < 1``.  ``t == 1`` forces ``rho = 0``.
    """
    y = data.y
    z = design_matrix(data.x)
    n, t = y.shape
    if t == 1 and fix_rho is None:
        fix_rho = 0.0
    if t == 1 and fix_rho != 0.0:
        raise ContractError("with a single occasion rho is not identified; it must be fixed at 0")
    u = _to_unconstrained(theta_init)
    fit_rho = fix_rho is None
    if not fit_rho:
        u[-1] = np.arctanh(fix_rho)
    free = slice(None) if fit_rho else slice(0, -1)
    ll, g, h = ar1_objective(u, y, z, fit_rho=fit_rho)
    for _ in range(max_iter):
        try:
            np.linalg.cholesky(-h)
            step = np.linalg.solve(-h, g)
        except np.linalg.LinAlgError:
            # not negative definite: Newton step on |eigenvalues| (an ascent direction)
            w, vec = np.linalg.eigh(-h)
            w = np.maximum(np.abs(w), 1e-8 * max(np.abs(w).max(), 1.0))
            step = vec @ ((vec.T @ g) / w)
        accepted = False
        for _half in range(21):
            cand = u.copy()
            cand[free] += step
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                ll_new = ar1_objective(cand, y, z, with_derivatives=False)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            if np.max(np.abs(step)) < tol:
                return _from_unconstrained(u)
            raise OptimizationError("Newton-Raphson made no progress after 20 step halvings")
        u = cand
        if np.max(np.abs(step)) < tol:
            return _from_unconstrained(u)
        ll, g, h = ar1_objective(u, y, z, fit_rho=fit_rho)
    raise NonConvergenceError(
        f"Newton-Raphson did not converge in {max_iter} iterations", last=_from_unconstrained(u)
    )


# --------------------------------------------------------------------------- chain


def initial_theta(ds: LongitudinalDataset) -> ResponseModelParams:
    """Complete-case OLS over observed cells, rho = 0, sigma = residual SD."""
    z = design_matrix(ds.x)
    rows, _cols = np.nonzero(ds.y_mask)
    zz = z[rows]
    yy = ds.y[ds.y_mask]
    if ds.n < 2 or yy.size <= z.shape[1]:
        raise DataError(f"{ds.n} subject(s) are insufficient to estimate the response model")
    if np.linalg.matrix_rank(zz) < z.shape[1]:
        raise DataError("response design is rank deficient")
    beta, *_ = np.linalg.lstsq(zz, yy, rcond=None)
    resid = yy - zz @ beta
    sd = float(np.sqrt(resid @ resid / max(yy.size - z.shape[1], 1)))
    if not sd > 0:
        raise DataError("observed responses are fitted exactly; residual variance is zero")
    return ResponseModelParams(tuple(beta), sd, 0.0)


def dropout_counts(dropout, t):
    dropout = np.asarray(dropout)
    events = int(np.sum(dropout <= t))
    at_risk = int(np.sum(np.minimum(dropout, t) - 1))
    return events, at_risk


def initial_psi(ds: LongitudinalDataset):
    """(logit of the empirical per-occasion hazard, 0, 0); None if not estimable."""
    events, at_risk = dropout_counts(ds.dropout, ds.t)
    if events == 0 or events == at_risk:
        return None
    return DropoutParams(float(logit(events / at_risk)), 0.0, 0.0)


def _iteration(ds, theta, psi, psi_estimable, config, rng):
    t = ds.t
    z = design_matrix(ds.x)
    cov = ar1_covariance(theta.sigma, theta.rho, t)
    means = z @ np.asarray(theta.beta)
    y_full, attempts = s_step_batch(ds.y, ds.dropout, means, cov, psi, rng, config.max_reject)
    data = PseudoComplete(y_full, ds.x, ds.dropout)
    if psi_estimable:
        X, out = dropout_design(y_full, ds.dropout)
        psi = m1_logistic(X, out, psi.vector(), config.m1_tolerance, config.m1_max_iter)
    theta = m2_normal(data, theta, config.m2_tolerance, config.m2_max_iter)
    return theta, psi, int(attempts.sum())


def sem_run(ds: LongitudinalDataset, config: SemConfig, rng, init_theta=None, init_psi=None):
    """Run one stochastic EM chain on a dataset with complete covariates.

    Returns ``(chain, theta_hat, psi_hat)``; ``psi_hat`` is None when the
    observed dropout pattern has no events (or no survivals) at risk, since
    the dropout logistic MLE then does not exist.
    """
    if not ds.covariates_complete():
        raise ContractError("sem_run needs complete covariates; impute them first")
    theta = init_theta if init_theta is not None else initial_theta(ds)
    estimable = initial_psi(ds) is not None
    psi = (init_psi if init_psi is not None else initial_psi(ds)) if estimable else None
    p = len(theta.beta) + 2
    nit = config.n_iterations
    theta_rec = np.empty((nit, p))
    psi_rec = np.full((nit, 3), np.nan)
    att_rec = np.zeros(nit, dtype=np.int64)

    if ds.response_complete():
        # S-step is the identity, so every iteration repeats the same M-step.
        theta = m2_normal(PseudoComplete.from_dataset(ds), theta, config.m2_tolerance, config.m2_max_iter)
        theta_rec[:] = theta.vector()
    else:
        for it in range(nit):
            try:
                theta_new, psi_new, att = _iteration(ds, theta, psi, estimable, config, rng)
            except SemDropError as exc:
                log.info("SEM iteration %d failed (%s); retrying with fresh S-step draws", it + 1, exc)
                theta_new, psi_new, att = _iteration(ds, theta, psi, estimable, config, rng)
            theta, psi = theta_new, psi_new
            theta_rec[it] = theta.vector()
            if psi is not None:
                psi_rec[it] = psi.vector()
            att_rec[it] = att
    chain = SemChain(theta_rec, psi_rec, att_rec, config.burn_in)
    theta_hat, psi_hat = chain.point_estimates()
    return chain, theta_hat, psi_hat


def pool_mi(estimates):
    """Coordinate-wise mean of ``(theta_hat, psi_hat)`` pairs."""
    estimates = list(estimates)
    if not estimates:
        raise ContractError("pool_mi needs at least one estimate set")
    dims = {len(th.beta) for th, _ in estimates}
    has_psi = {ps is not None for _, ps in estimates}
    if len(dims) != 1 or len(has_psi) != 1:
        raise ContractError("estimate sets have mismatched dimensions")
    theta = ResponseModelParams.from_vector(_mean_rows([th.vector() for th, _ in estimates]))
    psi = None
    if has_psi.pop():
        psi = DropoutParams.from_vector(_mean_rows([ps.vector() for _, ps in estimates]))
    return theta, psi


def _mean_rows(rows):
    # centring on the first row keeps the mean of identical rows exact
    rows = np.asarray(rows)
    return rows[0] + (rows - rows[0]).mean(axis=0)
