"""Monte Carlo Louis-formula information matrix and standard errors.

Parameters are ordered ``(beta_0..beta_k, sigma, rho, psi0, psi1, psi2)`` on
their natural scale.  The complete-data log-likelihood is the AR(1) normal
term plus the Bernoulli dropout term over the at-risk rows.  The two terms
share no parameters, so each is differenced with its own stencil and the
cross block of the Hessian is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import (
    LongitudinalDataset,
    PseudoComplete,
    DropoutParams,
    ResponseModelParams,
    ar1_covariance,
    ar1_loglik_batch,
    design_matrix,
)
from .errors import ContractError, DefinitenessError, NumericError
from .sem import dropout_design, s_step_batch

REL_STEP = 1e-5


def param_names(k: int, include_dropout: bool = True):
    names = [f"beta{i}" for i in range(k + 1)] + ["sigma", "rho"]
    return names + ["psi0", "psi1", "psi2"] if include_dropout else names


def pack_params(theta: ResponseModelParams, psi=None) -> np.ndarray:
    vec = theta.vector()
    return vec if psi is None else np.concatenate([vec, psi.vector()])


@dataclass(frozen=True, eq=False)
class InformationResult:
    info: np.ndarray
    e_hat: np.ndarray
    c_hat: np.ndarray
    m_se: int
    names: tuple


def _normal_values(points, data: PseudoComplete):
    kp = data.x.shape[1] + 1
    return ar1_loglik_batch(data.y, data.x, points[:, :kp], points[:, kp], points[:, kp + 1])


def _dropout_values(points, design):
    X, out = design
    eta = X @ points.T  # (rows, N)
    return out @ eta - np.logaddexp(0.0, eta).sum(axis=0)


def _stencil(func, x, want_hessian=True):
    """Central first and second differences of a vectorised scalar function."""
    x = np.asarray(x, dtype=float)
    p = x.size
    h = REL_STEP * np.maximum(1.0, np.abs(x))
    eye = np.diag(h)
    pts = [x[None, :], x + eye, x - eye]
    pairs = [(r, s) for r in range(p) for s in range(r + 1, p)] if want_hessian else []
    if pairs:
        rr, ss = np.array(pairs).T
        er, es = eye[rr], eye[ss]
        pts += [x + er + es, x + er - es, x - er + es, x - er - es]
    vals = func(np.vstack(pts))
    if not np.isfinite(vals).all():
        raise NumericError("non-finite log-likelihood inside the finite-difference stencil")
    f0, fp, fm = vals[0], vals[1 : p + 1], vals[p + 1 : 2 * p + 1]
    grad = (fp - fm) / (2.0 * h)
    if not want_hessian:
        return grad, None
    hess = np.diag((fp - 2.0 * f0 + fm) / h**2)
    if pairs:
        m = len(pairs)
        base = 2 * p + 1
        fpp, fpm, fmp, fmm = (vals[base + i * m : base + (i + 1) * m] for i in range(4))
        off = (fpp - fpm - fmp + fmm) / (4.0 * h[rr] * h[ss])
        hess[rr, ss] = off
        hess[ss, rr] = off
    return grad, 0.5 * (hess + hess.T)


def _split(params, data: PseudoComplete):
    params = np.asarray(params, dtype=float)
    kp = data.x.shape[1] + 3
    if params.size not in (kp, kp + 3):
        raise ContractError(f"expected {kp} or {kp + 3} parameters, got {params.size}")
    return params[:kp], (params[kp:] if params.size > kp else None)


def _derivatives(params, data: PseudoComplete, want_hessian=True):
    theta, psi = _split(params, data)
    g_n, h_n = _stencil(lambda pts: _normal_values(pts, data), theta, want_hessian)
    if psi is None:
        return g_n, h_n
    design = dropout_design(data.y, data.dropout)
    g_d, h_d = _stencil(lambda pts: _dropout_values(pts, design), psi, want_hessian)
    grad = np.concatenate([g_n, g_d])
    if not want_hessian:
        return grad, None
    p_n = theta.size
    hess = np.zeros((grad.size, grad.size))
    hess[:p_n, :p_n] = h_n
    hess[p_n:, p_n:] = h_d
    return grad, hess


def complete_data_loglik(params, data: PseudoComplete) -> float:
    theta, psi = _split(params, data)
    val = _normal_values(theta[None, :], data)[0]
    if psi is not None:
        val += _dropout_values(psi[None, :], dropout_design(data.y, data.dropout))[0]
    return float(val)


def complete_data_score(params, data: PseudoComplete) -> np.ndarray:
    return _derivatives(params, data, want_hessian=False)[0]


def complete_data_hessian(params, data: PseudoComplete) -> np.ndarray:
    return _derivatives(params, data)[1]


def _score_covariance(scores):
    scores = np.asarray(scores)
    dev = scores - scores.mean(axis=0)
    c = dev.T @ dev / (scores.shape[0] - 1)
    return 0.5 * (c + c.T)


def monte_carlo_information(theta: ResponseModelParams, psi, ds: LongitudinalDataset, m_se: int,
                            rng, max_reject: int = 100_000) -> InformationResult:
    """Empirical Louis information ``-E - C`` from ``m_se`` S-step completions.

    With ``psi=None`` only the response-model block is returned.
    """
    if m_se < 2:
        raise ContractError("m_se must be at least 2")
    if not ds.covariates_complete():
        raise ContractError("information needs complete covariates")
    params = pack_params(theta, psi)
    names = tuple(param_names(ds.k, psi is not None))
    if ds.response_complete():
        # every completion equals the observed data
        _, e_hat = _derivatives(params, PseudoComplete.from_dataset(ds))
        c_hat = np.zeros_like(e_hat)
    else:
        cov = ar1_covariance(theta.sigma, theta.rho, ds.t)
        means = design_matrix(ds.x) @ np.asarray(theta.beta)
        hess_sum = np.zeros((params.size, params.size))
        scores = np.empty((m_se, params.size))
        for j in range(m_se):
            y_full, _ = s_step_batch(ds.y, ds.dropout, means, cov, psi, rng, max_reject)
            g, h = _derivatives(params, PseudoComplete(y_full, ds.x, ds.dropout))
            scores[j] = g
            hess_sum += h
        e_hat = hess_sum / m_se
        c_hat = _score_covariance(scores)
    info = -e_hat - c_hat
    return InformationResult(0.5 * (info + info.T), e_hat, c_hat, m_se, names)


def standard_errors(info, estimates=None):
    """Square roots of the diagonal of ``info^{-1}``; two-sided normal p-values."""
    info = np.asarray(info, dtype=float)
    try:
        cov = np.linalg.solve(info, np.eye(info.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError("information matrix is singular") from exc
    diag = np.diag(cov)
    if not (diag > 0).all():
        bad = np.flatnonzero(~(diag > 0)).tolist()
        raise DefinitenessError(f"inverse information has non-positive diagonal at positions {bad}")
    se = np.sqrt(diag)
    if estimates is None:
        return se, None
    z = np.asarray(estimates, dtype=float) / se
    return se, 2.0 * norm.sf(np.abs(z))
