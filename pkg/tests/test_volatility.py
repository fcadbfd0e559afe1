import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evarisk.expectile import sample_expectile
from evarisk.volatility import (GarchError, GarchParams, care_fit, care_from_garch, garch_filter,
                                garch_fit, garch_forecast, garch_simulate, garch_variance,
                                student_t_quantile)

TRUE = GarchParams(omega=2e-6, alpha_g=0.08, beta_g=0.90)


@pytest.fixture(scope="module")
def long_sample():
    return garch_simulate(TRUE, 20_000, seed=1)


@pytest.fixture(scope="module")
def long_fit(long_sample):
    return garch_fit(long_sample)


def test_recovery(long_fit):
    p = long_fit.params
    assert abs(p.alpha_g - 0.08) <= 0.02
    assert abs(p.beta_g - 0.90) <= 0.02
    assert abs(p.omega / 2e-6 - 1) <= 0.5
    assert not long_fit.at_boundary


def test_likelihood_history_monotone(long_fit):
    h = np.asarray(long_fit.history)
    assert h.size > 1
    assert np.all(np.diff(h) >= -1e-9 * np.abs(h[:-1]))


def test_variances_positive(long_fit):
    assert np.all(long_fit.cond_variance > 0)
    assert long_fit.std_residuals.shape == long_fit.cond_variance.shape


def test_scale_covariance(long_sample, long_fit):
    c = 100.0
    scaled = garch_fit(c * long_sample).params
    p = long_fit.params
    assert scaled.omega == pytest.approx(c ** 2 * p.omega, rel=1e-3)
    assert abs(scaled.alpha_g - p.alpha_g) <= 1e-3
    assert abs(scaled.beta_g - p.beta_g) <= 1e-3


def test_unconditional_variance_round_trip():
    r = garch_simulate(TRUE, 50_000, seed=9)
    fit = garch_fit(r)
    assert fit.params.unconditional_variance == pytest.approx(TRUE.unconditional_variance, rel=0.10)
    again = garch_simulate(fit.params, 50_000, seed=10)
    assert again.var() == pytest.approx(TRUE.unconditional_variance, rel=0.10)


def test_iid_normal_gives_small_alpha():
    rng = np.random.default_rng(55)
    small = [garch_fit(rng.normal(0, 0.01, 2000)).params.alpha_g <= 0.03 for _ in range(200)]
    assert np.mean(small) >= 0.90


def test_student_t_fit_recovers_nu():
    params = GarchParams(2e-6, 0.08, 0.90, nu=5.0)
    fit = garch_fit(garch_simulate(params, 20_000, dist="student_t", seed=4), dist="student_t")
    assert fit.innovation_dist == "student_t"
    assert 4.0 <= fit.params.nu <= 6.5
    assert fit.params.nu >= 2.1


def test_errors():
    with pytest.raises(GarchError, match="too short"):
        garch_fit(np.random.default_rng(0).normal(size=50))
    with pytest.raises(GarchError):
        garch_fit(np.random.default_rng(0).normal(size=300), dist="cauchy")
    with pytest.raises(GarchError):
        GarchParams(1e-6, 0.5, 0.6).validate()
    with pytest.raises(GarchError):
        garch_simulate(GarchParams(1e-6, 0.1, 0.8), 10, dist="student_t")


def test_simulate_degenerate_and_deterministic():
    p = GarchParams(4e-4, 0.0, 0.0)
    r = garch_simulate(p, 200_000, seed=3)
    assert r.var() == pytest.approx(4e-4, rel=0.01)
    assert np.array_equal(garch_simulate(TRUE, 500, seed=12), garch_simulate(TRUE, 500, seed=12))
    assert not np.array_equal(garch_simulate(TRUE, 500, seed=12), garch_simulate(TRUE, 500, seed=13))


def test_simulated_student_t_has_unit_variance_innovations():
    p = GarchParams(1.0, 0.0, 0.0, nu=5.0)
    r = garch_simulate(p, 400_000, dist="student_t", seed=8)
    assert r.var() == pytest.approx(1.0, rel=0.03)


def test_forecast_examples():
    r = np.random.default_rng(0).normal(size=300)
    flat = garch_filter(r, GarchParams(0.7, 0.0, 0.0))
    assert np.allclose(garch_forecast(flat, 5), 0.7)

    # hand recursion on a 3-point series
    p = GarchParams(0.1, 0.2, 0.7, mean_mu=0.5)
    x = np.array([1.0, -0.5, 2.0])
    g = garch_filter(x, p, s2_0=1.0)
    s2 = [1.0]
    for t in (1, 2):
        s2.append(0.1 + 0.2 * (x[t - 1] - 0.5) ** 2 + 0.7 * s2[-1])
    assert np.allclose(g.cond_variance, s2, rtol=0, atol=1e-15)
    assert garch_forecast(g, 1)[0] == pytest.approx(0.1 + 0.2 * 1.5 ** 2 + 0.7 * s2[-1], abs=1e-15)

    long = garch_forecast(g, 10_000)
    assert long[-1] == pytest.approx(p.unconditional_variance, abs=1e-6)
    with pytest.raises(GarchError):
        garch_forecast(g, 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-8, 1.0), st.floats(0, 0.5), st.floats(0, 0.49), st.integers(0, 2 ** 31))
def test_variance_recursion_positive_and_matches_loop(omega, a, b, seed):
    e = np.random.default_rng(seed).standard_t(3, size=200)
    s2 = garch_variance(e, omega, a, b, 1.0)
    ref = [1.0]
    for t in range(1, 200):
        ref.append(omega + a * e[t - 1] ** 2 + b * ref[-1])
    assert np.all(s2 > 0)
    assert np.allclose(s2, ref, rtol=1e-12, atol=0)


def test_care_identities(long_sample, long_fit):
    c = care_from_garch(long_fit, 0.5)
    assert abs(c.xi_tau) < 0.05
    assert c.xi_tau == pytest.approx(long_fit.std_residuals.mean(), abs=1e-12)
    c = care_from_garch(long_fit, 0.05)
    expected = long_fit.params.mean_mu + np.sqrt(long_fit.cond_variance) * c.xi_tau
    assert np.max(np.abs(c.evar_path - expected)) <= 1e-12
    assert c.xi_tau == sample_expectile(long_fit.std_residuals, 0.05)
    assert c.forecast(1)[0] == pytest.approx(
        long_fit.params.mean_mu + np.sqrt(long_fit.next_variance()) * c.xi_tau)


def test_care_calibrated_round_trip():
    r = garch_simulate(TRUE, 10_000, seed=21)
    c = care_fit(r, alpha=0.95)
    rate = np.mean(r < c.evar_path)
    assert abs(rate - 0.05) <= 0.007
    with pytest.raises(GarchError):
        care_fit(r)
    with pytest.raises(GarchError):
        care_fit(r, tau=0.1, alpha=0.95)


def test_student_t_quantile():
    assert student_t_quantile(0.05, 5.0) == pytest.approx(-1.5608, abs=1e-4)
