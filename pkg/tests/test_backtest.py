import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from evarisk.backtest import (FAMILIES, BacktestError, VarModelSpec, asymmetric_linear_loss,
                              christoffersen_cc, dq_test, eval_indices, forecast_var, hit_sequence,
                              independence_lr, kupiec_uc, quadratic_loss, run_backtest)
from evarisk.data_io import AlignedDataset, ReturnSeries, read_report, write_report
from evarisk.volatility import GarchParams, garch_simulate


def series(r, start="2000-01-03"):
    return ReturnSeries(np.datetime64(start) + np.arange(len(r)), r)


def hits_from(pattern):
    return np.asarray(pattern, dtype=bool)


# --- specs and forecasts -----------------------------------------------------------------

def test_spec_validation():
    assert VarModelSpec("historical_sim").window == 250
    assert VarModelSpec("evar").window == 1000
    assert VarModelSpec("evar", name="e2").model_id == "e2"
    for bad in ({"family": "nope"}, {"family": "evar", "window": 100},
                {"family": "evar", "alpha": 0.5}, {"family": "evar", "alpha": 1.0},
                {"family": "evar", "refit_every": 0}):
        with pytest.raises(BacktestError):
            VarModelSpec(**bad)


def test_historical_simulation_constant_returns():
    r = series(np.full(400, -0.003))
    fc = forecast_var(VarModelSpec("historical_sim"), r)
    assert len(fc) == 150
    assert np.all(fc.var_forecasts == -0.003)


def test_historical_simulation_uses_past_window_only():
    x = np.random.default_rng(0).normal(size=300)
    fc = forecast_var(VarModelSpec("historical_sim", alpha=0.99), series(x))
    for j, t in enumerate(range(250, 300)):
        assert fc.var_forecasts[j] == pytest.approx(np.quantile(x[t - 250:t], 0.01), rel=1e-13)


def test_parametric_normal_constant_variance_on_iid_data():
    sigma = 0.012
    x = np.random.default_rng(1).normal(0, sigma, 10_000)
    data = series(x)
    spec = VarModelSpec("parametric_normal", window=9000, variance="constant")
    fc = forecast_var(spec, data, (data.dates[-1000], None))
    ref = sigma * stats.norm.ppf(0.05)
    assert np.max(np.abs(fc.var_forecasts / ref - 1)) <= 0.02
    # the alpha = beta = 0 model is the window mean and ML standard deviation
    w = x[:9000]
    assert fc.var_forecasts[0] == pytest.approx(w.mean() + w.std() * stats.norm.ppf(0.05), rel=1e-12)


def test_constant_variance_only_for_normal_families():
    with pytest.raises(BacktestError):
        VarModelSpec("garch_t", variance="constant")
    with pytest.raises(BacktestError):
        VarModelSpec("evar", variance="ewma")


def test_evar_out_of_sample_rate():
    params = GarchParams(2e-6, 0.08, 0.90, nu=5.0)
    x = garch_simulate(params, 8000, dist="student_t", seed=3)
    data = series(x)
    fc = forecast_var(VarModelSpec("evar"), data, (data.dates[-3000], None))
    rate = hit_sequence(x[-3000:], fc).mean()
    assert abs(rate - 0.05) <= 0.01
    assert fc.taus is not None and np.all((fc.taus > 0) & (fc.taus < 0.5))


def test_forecast_family_relations():
    x = garch_simulate(GarchParams(2e-6, 0.08, 0.90, nu=6.0), 1400, dist="student_t", seed=4)
    data = AlignedDataset.from_returns(series(x))
    cache = {}
    out = {f: forecast_var(VarModelSpec(f, alpha=0.99), data, cache=cache) for f in FAMILIES}
    assert all(len(fc) == 400 for f, fc in out.items() if f != "historical_sim")
    assert len(out["historical_sim"]) == 1150
    # the normal-based families share one rolling GARCH path
    assert len(cache) == 2
    assert np.all(out["parametric_normal"].var_forecasts < 0)
    assert not np.array_equal(out["filtered_hs"].var_forecasts, out["evar"].var_forecasts)


def test_forecast_errors():
    x = np.random.default_rng(2).normal(size=600)
    data = series(x)
    with pytest.raises(BacktestError, match="insufficient history"):
        forecast_var(VarModelSpec("evar", window=500), data, (data.dates[300], None))
    with pytest.raises(BacktestError):
        eval_indices(data.dates, ("2100-01-01", None))


# --- hits ---------------------------------------------------------------------------------

def test_hit_examples():
    assert hit_sequence([-0.02], [-0.02]).tolist() == [False]
    assert hit_sequence([-0.03], [-0.02]).tolist() == [True]
    rng = np.random.default_rng(3)
    r, v = rng.normal(size=500), rng.normal(size=500)
    assert np.array_equal(hit_sequence(r, v), np.array([a < b for a, b in zip(r, v)]))
    with pytest.raises(BacktestError):
        hit_sequence([0.0, 1.0], [0.0])


# --- Kupiec and Christoffersen ------------------------------------------------------------------

def kupiec_oracle(x, n, p0):
    ph = x / n
    ll0 = x * math.log(p0) + (n - x) * math.log(1 - p0)
    ll1 = (x * math.log(ph) if x else 0.0) + ((n - x) * math.log(1 - ph) if x < n else 0.0)
    return -2 * (ll0 - ll1)


def test_kupiec_examples():
    h = np.zeros(1000, dtype=bool)
    h[:50] = True
    res = kupiec_uc(h, 0.95)
    assert res.statistic == 0.0 and res.p_value == 1.0
    h[:70] = True
    res = kupiec_uc(h, 0.95)
    assert res.statistic == pytest.approx(kupiec_oracle(70, 1000, 0.05), rel=1e-12)
    assert res.statistic == pytest.approx(7.53, abs=0.01)
    assert res.p_value == pytest.approx(0.006, abs=0.0005)
    res = kupiec_uc(np.zeros(1000, dtype=bool), 0.95)
    assert res.statistic == pytest.approx(-2000 * math.log(0.95), rel=1e-12)
    assert res.statistic == pytest.approx(102.6, abs=0.05)
    assert res.decision_at_5pct


def test_independence_null_gives_zero():
    h = hits_from([0, 0, 1, 1] * 100 + [0])
    cc = christoffersen_cc(h, 0.5)
    assert independence_lr(h) == pytest.approx(0.0, abs=1e-9)
    assert cc.statistic == pytest.approx(kupiec_uc(h, 0.5).statistic, abs=1e-9)


def test_alternating_hits_transition_oracle():
    h = hits_from([0, 1] * 200)
    n01, n10, n0, n1 = 200, 199, 200, 199
    pi = n01 / (n0 + n1)
    ll_iid = n01 * math.log(pi) + (n0 + n1 - n01) * math.log(1 - pi)
    ll_markov = 0.0  # every transition is certain
    assert independence_lr(h) == pytest.approx(-2 * (ll_iid - ll_markov), rel=1e-12)
    res = christoffersen_cc(h, 0.95)
    assert res.p_value < 1e-10


def test_uc_cc_size():
    rng = np.random.default_rng(99)
    uc, cc = [], []
    for _ in range(500):
        h = rng.random(1000) < 0.05
        uc.append(kupiec_uc(h, 0.95).decision_at_5pct)
        cc.append(christoffersen_cc(h, 0.95).decision_at_5pct)
    assert 0.02 <= np.mean(uc) <= 0.09
    assert 0.02 <= np.mean(cc) <= 0.09


# --- DQ -----------------------------------------------------------------------------------------

def test_dq_size():
    rng = np.random.default_rng(7)
    rej = [dq_test(rng.random(1000) < 0.05, rng.normal(-0.02, 0.005, 1000), 0.95).decision_at_5pct
           for _ in range(500)]
    assert 0.02 <= np.mean(rej) <= 0.09


def test_dq_power_on_clustered_hits():
    rng = np.random.default_rng(8)
    start = rng.random(1000) < 0.025
    h = start.copy()
    h[1:] |= start[:-1]
    res = dq_test(h, rng.normal(-0.02, 0.005, 1000), 0.95)
    assert res.p_value < 0.001


def test_dq_constant_forecast_dropped():
    rng = np.random.default_rng(9)
    res = dq_test(rng.random(500) < 0.05, np.full(500, -0.02), 0.95)
    assert "forecast regressor dropped" in res.note
    assert res.df == 5
    assert np.isfinite(res.statistic)


def test_dq_matches_direct_formula():
    rng = np.random.default_rng(10)
    h = rng.random(300) < 0.1
    v = rng.normal(size=300)
    res = dq_test(h, v, 0.9, lags=2)
    dev = h - 0.1
    X = np.column_stack([np.ones(298), dev[1:-1], dev[:-2], v[2:]])
    y = dev[2:]
    b = np.linalg.solve(X.T @ X, X.T @ y)
    ref = (y @ X @ b) / (0.1 * 0.9)
    assert res.statistic == pytest.approx(ref, rel=1e-10)
    assert res.df == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 1e3))
def test_tests_invariant_to_joint_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    r = rng.standard_t(4, 400) * 0.01
    v = rng.normal(-0.016, 0.003, 400)
    h0, h1 = hit_sequence(r, v), hit_sequence(c * r, c * v)
    assert np.array_equal(h0, h1)
    assert kupiec_uc(h1, 0.95).statistic == kupiec_uc(h0, 0.95).statistic
    assert christoffersen_cc(h1, 0.95).statistic == christoffersen_cc(h0, 0.95).statistic
    d0, d1 = dq_test(h0, v, 0.95).statistic, dq_test(h1, c * v, 0.95).statistic
    assert d1 == pytest.approx(d0, rel=1e-8, abs=1e-10)


# --- losses ---------------------------------------------------------------------------------------

def test_loss_examples():
    assert asymmetric_linear_loss([-0.03], [-0.02], 0.95) == pytest.approx(0.0095, abs=1e-15)
    assert asymmetric_linear_loss([0.01], [-0.02], 0.95) == pytest.approx(0.0015, abs=1e-15)
    r = np.random.default_rng(0).normal(size=50)
    assert asymmetric_linear_loss(r, r, 0.95) == 0.0
    assert quadratic_loss([0.01, 0.02], [-0.02, -0.02]) == 0.0
    assert quadratic_loss([-0.03, 0.02], [-0.02, -0.02]) == pytest.approx(1e-4, abs=1e-15)


def test_loss_minimised_near_empirical_quantile():
    r = np.random.default_rng(11).standard_t(4, 2000) * 0.01
    grid = np.linspace(r.min(), r.max(), 20_001)
    grid_min = min(asymmetric_linear_loss(r, np.full(r.size, g), 0.95) for g in grid[::10])
    q = np.quantile(r, 0.05)
    assert asymmetric_linear_loss(r, np.full(r.size, q), 0.95) <= 1.01 * grid_min


# --- orchestration ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    x = garch_simulate(GarchParams(2e-6, 0.08, 0.90, nu=5.0), 1400, dist="student_t", seed=12)
    return AlignedDataset.from_returns(series(x))


@pytest.fixture(scope="module")
def small_report(small_data):
    specs = [VarModelSpec(f) for f in FAMILIES]
    return run_backtest(small_data, specs, [0.95, 0.99], (small_data.dates[-300], None),
                        meta={"seed": 1})


def test_report_fields(small_data, small_report):
    assert len(small_report.cells) == 10
    assert small_report.failures == []
    for c in small_report.cells:
        fc = small_report.forecasts[(c.model_id, c.alpha)]
        assert c.n_obs == 300
        hits = hit_sequence(small_data.returns[-300:], fc)
        assert c.n_violations == int(hits.sum())
        assert c.violation_rate == c.n_violations / c.n_obs
        assert set(c.tests) == {"uc", "cc", "dq"}
        assert all(0 <= t["p_value"] <= 1 for t in c.tests.values())
        assert c.losses["all_mean"] == pytest.approx(c.losses["all"] / 300)


def test_one_model_tiny(small_data):
    rep = run_backtest(small_data, [VarModelSpec("historical_sim")], [0.95],
                       (small_data.dates[-50], None))
    (cell,) = rep.cells
    d = cell.to_dict()
    assert d["n_obs"] == 50
    assert all(v is not None for v in d.values())
    assert rep.meta["dq_lags"] == 4


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_round_trip(small_report, tmp_path, fmt):
    path = tmp_path / f"rep.{fmt}"
    write_report(small_report, path, fmt)
    assert read_report(path) == small_report


def test_failed_cell_recorded(small_data):
    specs = [VarModelSpec("historical_sim"), VarModelSpec("evar", window=1200)]
    rep = run_backtest(small_data, specs, [0.95], (small_data.dates[-300], None))
    assert [c.model_id for c in rep.cells] == ["historical_sim"]
    assert rep.failures[0]["model_id"] == "evar"
    assert "insufficient history" in rep.failures[0]["error"]


def test_workers_do_not_change_results(small_data):
    specs = [VarModelSpec("historical_sim"), VarModelSpec("garch_t"), VarModelSpec("evar")]
    rng = (small_data.dates[-100], None)
    a = run_backtest(small_data, specs, [0.95], rng)
    b = run_backtest(small_data, specs, [0.95], rng, workers=2)
    assert a == b


def test_run_errors(small_data):
    with pytest.raises(BacktestError):
        run_backtest(small_data, [], [0.95])
    with pytest.raises(BacktestError):
        run_backtest(small_data, [VarModelSpec("evar")], [])
