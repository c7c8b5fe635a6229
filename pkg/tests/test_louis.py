import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semdrop.data import (
    DropoutParams,
    PseudoComplete,
    ResponseModelParams,
    ar1_covariance,
    design_matrix,
    mvn_loglik,
)
from semdrop.errors import ContractError, DefinitenessError
from semdrop.louis import (
    _score_covariance,
    complete_data_hessian,
    complete_data_loglik,
    complete_data_score,
    monte_carlo_information,
    pack_params,
    param_names,
    standard_errors,
)
from semdrop.sem import dropout_design, dropout_loglik, m2_normal
from semdrop.simulation import SimDesign, generate_complete, simulate_dataset

THETA = ResponseModelParams((5.0, 10.0), 6.0, 0.7)
PSI = DropoutParams(-0.5, 0.05, -0.05)


def complete_ds(n=40, t=4, seed=0):
    return generate_complete(SimDesign(n=n, t=t), np.random.default_rng(seed))


def mle(ds):
    return m2_normal(PseudoComplete.from_dataset(ds), ResponseModelParams((0.0, 0.0), 1.0, 0.0), tol=1e-12)


def richardson_hessian(f, x, h=1e-3):
    """Central second differences at h and h/2 combined by Richardson extrapolation."""
    def at(step):
        p = x.size
        out = np.empty((p, p))
        for i in range(p):
            for j in range(p):
                ei = np.eye(p)[i] * step * max(1, abs(x[i]))
                ej = np.eye(p)[j] * step * max(1, abs(x[j]))
                out[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                    4 * np.linalg.norm(ei) * np.linalg.norm(ej))
        return out
    return (4 * at(h / 2) - at(h)) / 3


def test_param_names():
    assert param_names(1) == ["beta0", "beta1", "sigma", "rho", "psi0", "psi1", "psi2"]
    assert param_names(2, include_dropout=False) == ["beta0", "beta1", "beta2", "sigma", "rho"]


# ------------------------------------------------------------------ score

def test_score_vanishes_at_mle():
    ds = complete_ds()
    est = mle(ds)
    g = complete_data_score(est.vector(), PseudoComplete.from_dataset(ds))
    assert np.max(np.abs(g)) < 1e-4


def test_beta_score_analytic():
    ds = complete_ds(n=15, t=3, seed=4)
    p = ResponseModelParams((4.0, 9.0), 5.0, 0.6)
    g = complete_data_score(p.vector(), PseudoComplete.from_dataset(ds))
    inv = np.linalg.inv(ar1_covariance(p.sigma, p.rho, 3))
    z = design_matrix(ds.x)
    resid = ds.y - (z @ np.asarray(p.beta))[:, None]
    analytic = z.T @ (resid @ inv @ np.ones(3))
    np.testing.assert_allclose(g[:2], analytic, atol=1e-6)


def test_loglik_additive_and_matches_parts():
    ds, _ = simulate_dataset(SimDesign(n=20, t=3, psi=tuple(PSI.vector()), method="complete-covariates"), 2, 0)
    y_full = np.where(ds.y_mask, ds.y, 1.5)
    data = PseudoComplete(y_full, ds.x, ds.dropout)
    params = pack_params(THETA, PSI)
    X, out = dropout_design(y_full, ds.dropout)
    expected = mvn_loglik(y_full, ds.x, THETA) + dropout_loglik(X, out, PSI.vector())
    assert complete_data_loglik(params, data) == pytest.approx(expected, rel=1e-12)
    double = PseudoComplete(np.vstack([y_full, y_full]), np.vstack([ds.x, ds.x]), np.concatenate([ds.dropout] * 2))
    assert complete_data_loglik(params, double) == pytest.approx(2 * expected, rel=1e-12)


# ---------------------------------------------------------------- hessian

def test_beta_hessian_analytic():
    ds = complete_ds(n=15, t=3, seed=5)
    p = ResponseModelParams((4.0, 9.0), 5.0, 0.6)
    h = complete_data_hessian(p.vector(), PseudoComplete.from_dataset(ds))
    inv = np.linalg.inv(ar1_covariance(p.sigma, p.rho, 3))
    z = design_matrix(ds.x)
    analytic = -(np.ones(3) @ inv @ np.ones(3)) * (z.T @ z)
    np.testing.assert_allclose(h[:2, :2], analytic, rtol=1e-4)


def test_hessian_symmetric_negative_definite():
    ds = complete_ds()
    data = PseudoComplete.from_dataset(ds)
    h = complete_data_hessian(mle(ds).vector(), data)
    assert np.array_equal(h, h.T)
    assert np.linalg.eigvalsh(h).max() < 0


def test_cross_block_is_zero():
    ds, _ = simulate_dataset(SimDesign(n=20, t=3, psi=tuple(PSI.vector()), method="complete-covariates"), 2, 0)
    data = PseudoComplete(np.where(ds.y_mask, ds.y, 1.0), ds.x, ds.dropout)
    h = complete_data_hessian(pack_params(THETA, PSI), data)
    assert (h[:4, 4:] == 0).all()


# ------------------------------------------------------------ information

def complete_data_se_identity():
    """Louis SEs on a fully observed set vs explicit inverse observed information.

    Returns (worst relative SE difference, c_hat).
    """
    ds = complete_ds(n=30, t=4, seed=7)
    est = mle(ds)
    info = monte_carlo_information(est, None, ds, 5, np.random.default_rng(0))
    se, _ = standard_errors(info.info)
    oracle_h = richardson_hessian(lambda v: mvn_loglik(ds.y, ds.x, ResponseModelParams.from_vector(v)),
                                  est.vector())
    oracle = np.sqrt(np.diag(np.linalg.inv(-oracle_h)))
    return float(np.max(np.abs(se / oracle - 1))), info.c_hat


def test_complete_data_identity():
    worst, c_hat = complete_data_se_identity()
    assert (c_hat == 0).all()
    assert worst < 1e-3


def test_identical_draws_zero_covariance():
    s = np.array([[1.0, -2.0, 3.5], [1.0, -2.0, 3.5]])
    assert (_score_covariance(s) == 0).all()


def _dropout_ds(seed=0):
    design = SimDesign(n=25, t=3, psi=tuple(PSI.vector()), method="complete-covariates")
    ds, _ = simulate_dataset(design, seed, 0)
    return ds


def test_information_shapes_and_symmetry():
    ds = _dropout_ds()
    res = monte_carlo_information(THETA, PSI, ds, 30, np.random.default_rng(1))
    assert res.names == tuple(param_names(1))
    for m in (res.info, res.e_hat, res.c_hat):
        assert m.shape == (7, 7)
        np.testing.assert_allclose(m, m.T, atol=1e-9 * np.abs(m).max())
    np.testing.assert_allclose(res.info, -res.e_hat - res.c_hat, rtol=1e-12, atol=1e-12)
    assert np.linalg.eigvalsh(res.c_hat).min() > -1e-8 * np.abs(res.c_hat).max()


def test_information_contract():
    ds = _dropout_ds()
    with pytest.raises(ContractError):
        monte_carlo_information(THETA, PSI, ds, 1, np.random.default_rng(0))
    xm = np.ones_like(ds.x_mask)
    xm[0] = False
    with pytest.raises(ContractError):
        monte_carlo_information(THETA, PSI, ds.with_masks(x_mask=xm), 5, np.random.default_rng(0))


def test_more_samples_less_noise():
    ds = _dropout_ds(1)  # the information at the truth is positive definite here
    def spread(m_se):
        ses = [standard_errors(monte_carlo_information(THETA, PSI, ds, m_se, np.random.default_rng(s)).info)[0]
               for s in range(12)]
        return np.std(ses, axis=0)
    assert (spread(600) < spread(60)).all()


# --------------------------------------------------------- standard errors

def test_standard_errors_examples():
    se, p = standard_errors(np.eye(3), [0.0, 1.0, -1.96])
    np.testing.assert_allclose(se, 1.0)
    np.testing.assert_allclose(p, [1.0, 0.31731050786291415, 0.04999579029644087], rtol=1e-10)
    se, _ = standard_errors(np.diag([4.0, 25.0]))
    np.testing.assert_allclose(se, [0.5, 0.2])


def test_standard_errors_indefinite():
    with pytest.raises(DefinitenessError):
        standard_errors(np.diag([1.0, -1.0]))
    with pytest.raises(DefinitenessError):
        standard_errors(np.zeros((2, 2)))


def explicit_inverse_se(info):
    inv = mpmath.matrix(info.tolist()) ** -1
    return np.array([float(mpmath.sqrt(inv[i, i])) for i in range(info.shape[0])])


def random_spd(seed, p):
    r = np.random.default_rng(seed)
    a = r.normal(0, 1, (p, p))
    return a @ a.T + 0.1 * np.eye(p)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_standard_errors_vs_explicit_inverse(seed, p):
    mpmath.mp.dps = 40
    info = random_spd(seed, p)
    se, _ = standard_errors(info)
    np.testing.assert_allclose(se, explicit_inverse_se(info), rtol=1e-10)


# ------------------------------------------------- sampling distribution

@pytest.mark.slow
def test_se_matches_sampling_sd(louis_replicates):
    ratio = louis_replicates["ratio"]
    assert np.all(np.abs(ratio - 1) <= 0.25), dict(zip(louis_replicates["names"], ratio.round(3)))
