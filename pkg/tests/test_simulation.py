import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from semdrop.data import CovariateMissingnessParams, DropoutParams
from semdrop.errors import ContractError, DomainError, HarnessError
from semdrop.sem import SemConfig
from semdrop.simulation import (
    SimDesign,
    apply_covariate_mar,
    apply_response_dropout,
    generate_complete,
    relative_bias,
    run_replication,
    run_replications,
    se_calibration,
    simulate_dataset,
)

# frozen regression target: dropouts among 10^6 subjects under the default
# design, streams SeedSequence(2026).spawn(3) for data, dropout, masking
FROZEN_DROPOUTS = 27
FROZEN_BY_OCCASION = [9, 8, 7, 3]

FAST = SemConfig(n_iterations=40, burn_in=10)


def _streams():
    return [np.random.default_rng(s) for s in np.random.SeedSequence(2026).spawn(3)]


# ---------------------------------------------------------------- generator

def test_noiseless_limit():
    ds = generate_complete(SimDesign(n=50, sigma=1e-12), np.random.default_rng(0))
    np.testing.assert_allclose(ds.y, np.repeat(5 + 10 * ds.x, 5, axis=1), atol=1e-9)


def test_generator_moments():
    ds = generate_complete(SimDesign(n=100_000), np.random.default_rng(1))
    assert abs(ds.y.mean() - 5.0) < 0.1
    resid = ds.y - (5 + 10 * ds.x)
    lag1 = np.corrcoef(resid[:, 1:].ravel(), resid[:, :-1].ravel())[0, 1]
    assert abs(lag1 - 0.7) < 0.02


def test_generator_replay():
    a = generate_complete(SimDesign(n=30), np.random.default_rng(4))
    b = generate_complete(SimDesign(n=30), np.random.default_rng(4))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.x, b.x)


def test_design_validation():
    with pytest.raises(ContractError):
        SimDesign(method="bogus")
    with pytest.raises(ContractError):
        SimDesign(n=1)
    with pytest.raises(DomainError):
        SimDesign(rho=1.0)


# ------------------------------------------------------------------ dropout

def test_dropout_extremes():
    ds = generate_complete(SimDesign(n=200), np.random.default_rng(0))
    none = apply_response_dropout(ds, DropoutParams(-1e3, 0, 0), np.random.default_rng(1))
    assert none.y_mask.all()
    every = apply_response_dropout(ds, DropoutParams(1e3, 0, 0), np.random.default_rng(1))
    assert (every.dropout == 2).all()


def test_frozen_dropout_count():
    g_data, g_drop, _ = _streams()
    design = SimDesign(n=10**6)
    ds = apply_response_dropout(generate_complete(design, g_data), DropoutParams(*design.psi), g_drop)
    counts = np.bincount(ds.dropout, minlength=design.t + 2)
    assert int((ds.dropout <= design.t).sum()) == FROZEN_DROPOUTS
    assert counts[2 : design.t + 1].tolist() == FROZEN_BY_OCCASION


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-4, 2), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_dropout_mask_structure(seed, p0, p1, p2):
    ds = generate_complete(SimDesign(n=20), np.random.default_rng(seed))
    out = apply_response_dropout(ds, DropoutParams(p0, p1, p2), np.random.default_rng(seed + 1))
    m = out.y_mask
    assert m[:, 0].all()
    assert not ((~m[:, :-1]) & m[:, 1:]).any()
    np.testing.assert_array_equal(out.y[m], ds.y[m])


def test_dropout_hazard_matches_model():
    # per-occasion hazard at occasion 2 vs the mean dropout probability
    ds = generate_complete(SimDesign(n=200_000, t=2), np.random.default_rng(8))
    psi = DropoutParams(-1.0, 0.05, -0.03)
    out = apply_response_dropout(ds, psi, np.random.default_rng(9))
    expected = expit(-1.0 + 0.05 * ds.y[:, 1] - 0.03 * ds.y[:, 0]).mean()
    assert (out.dropout == 2).mean() == pytest.approx(expected, abs=4 * np.sqrt(expected / 200_000))


# --------------------------------------------------------- covariate MAR

def test_mar_extremes_and_rates():
    ds = generate_complete(SimDesign(n=200_000), np.random.default_rng(2))
    assert apply_covariate_mar(ds, CovariateMissingnessParams(-np.inf, 0), np.random.default_rng(0)).x_mask.all()
    half = apply_covariate_mar(ds, CovariateMissingnessParams(0, 0), np.random.default_rng(0))
    assert (~half.x_mask).mean() == pytest.approx(0.5, abs=0.005)


def test_default_missing_rate_quadrature():
    # y_1 ~ N(5, 10^2 + 6^2); the missing rate is E[expit(-5 + 0.06 y_1)]
    sd = np.sqrt(100 + 36)
    oracle, _ = integrate.quad(lambda y: expit(-5 + 0.06 * y) * norm.pdf(y, 5, sd), -np.inf, np.inf)
    assert oracle == pytest.approx(0.0114, abs=1e-4)
    assert expit(-4.7) == pytest.approx(0.009, abs=1e-3)
    _, _, g_mar = _streams()
    ds = generate_complete(SimDesign(n=10**6), np.random.default_rng(3))
    rate = (~apply_covariate_mar(ds, CovariateMissingnessParams(-5, 0.06), g_mar).x_mask).mean()
    assert rate == pytest.approx(oracle, abs=4 * np.sqrt(oracle / 1e6))


def test_mar_literal_uses_previous_subject():
    ds = generate_complete(SimDesign(n=100_000), np.random.default_rng(6))
    eta = CovariateMissingnessParams(-1.0, 2.0)
    out = apply_covariate_mar(ds, eta, np.random.default_rng(7), literal=True)
    prev = np.concatenate([[0.0], ds.x[:-1, 0]])
    p = expit(-1.0 + 2.0 * prev)
    miss = ~out.x_mask[:, 0]
    # missingness tracks the previous subject's covariate, not the subject's own
    assert miss.mean() == pytest.approx(p.mean(), abs=0.01)
    assert np.corrcoef(miss, prev)[0, 1] > 0.3
    assert abs(np.corrcoef(miss, ds.x[:, 0])[0, 1]) < 0.02


def test_mar_masks_last_column_only():
    design = SimDesign(n=500, beta=(5.0, 10.0, -2.0))
    ds = generate_complete(design, np.random.default_rng(0))
    out = apply_covariate_mar(ds, CovariateMissingnessParams(0, 0), np.random.default_rng(1))
    assert out.x_mask[:, 0].all() and not out.x_mask[:, 1].all()


# ------------------------------------------------------------ relative bias

def test_relative_bias_examples():
    assert relative_bias(5.13, 5) == pytest.approx(0.026)
    assert relative_bias(9.61, 10) == pytest.approx(0.039)
    assert relative_bias(3.3, 3.3) == 0.0
    with pytest.raises(DomainError):
        relative_bias(1.0, 0.0)


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6).filter(lambda v: v != 0))
def test_relative_bias_nonnegative(est, truth):
    assert relative_bias(est, truth) >= 0


# ------------------------------------------------------------- replications

def _small(**kw):
    base = dict(n=25, t=3, psi=(-0.5, 0.05, -0.05), eta=(-1.5, 0.03), m=2, sem=FAST)
    base.update(kw)
    return SimDesign(**base)


def test_single_replication_report():
    design = _small(replications=1)
    report = run_replications(design, seed=5)
    single = run_replication(design, 5, 0)
    np.testing.assert_array_equal(report.est, single)
    assert report.n_replications == 1 and report.n_failed == 0


def test_report_rb_consistent():
    design = _small(replications=4)
    report = run_replications(design, seed=2)
    finite = np.isfinite(report.est)
    for i in np.flatnonzero(finite):
        assert report.rb[i] == relative_bias(report.est[i], report.truth[i])
    assert (report.rb[finite] >= 0).all()
    text = report.to_text("demo")
    assert text.splitlines()[1].split() == ["β0", "β1", "ρ", "σ", "Ψ0", "Ψ1", "Ψ2"]
    assert report.to_csv().splitlines()[0] == "parameter,true,est,rb"


def test_complete_covariates_coincide_with_zero_missing_mar():
    # with eta0 -> -inf no covariate is masked, so both paths see the same data
    cc = _small(method="complete-covariates", replications=3)
    mar = _small(method="regression", eta=(-np.inf, 0.0), replications=3)
    a = run_replications(cc, seed=9)
    b = run_replications(mar, seed=9)
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_jobs_do_not_change_results():
    design = _small(replications=4)
    a = run_replications(design, seed=3, jobs=1)
    b = run_replications(design, seed=3, jobs=2)
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_harness_error_on_failures():
    # separation is certain when every subject drops at occasion 2 and psi is refitted
    design = _small(psi=(1e3, 0.0, 0.0), replications=2)
    ds, _ = simulate_dataset(design, 0, 0)
    assert (ds.dropout == 2).all()
    report = run_replications(design, seed=0)
    assert report.n_psi_estimable == 0  # only events at risk: dropout model not estimable
    stall = _small(psi=(1e3, 0.0, 0.0), method="regression", replications=2,
                   sem=SemConfig(n_iterations=5, burn_in=1, m2_max_iter=1, m2_tolerance=1e-300))
    with pytest.raises(HarnessError) as info:
        run_replications(stall, seed=0)
    assert info.value.report.n_failed == 2


def test_se_calibration_smoke():
    design = _small(m=1, method="complete-covariates", psi=(-0.5, 0.05, -0.05), m_se=20)
    rep = se_calibration(design, 3, seed=1)
    assert rep.estimates.shape == (3, 7) and rep.se.shape == (3, 7)
    assert rep.attempts >= 3 and rep.attempts - 3 == len(rep.failures)
    assert rep.ratio.shape == (7,)
