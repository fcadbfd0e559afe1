import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evarisk.backtest import BacktestCell, BacktestReport
from evarisk.data_io import (AlignedDataset, DataError, ExogenousPanel, PriceSeries, ReturnSeries,
                             align_exogenous, load_exogenous, load_price_series, load_return_series,
                             read_report, to_log_returns, write_report)


def _write(path, text):
    path.write_text(text)
    return path


def _dates(n, start="2020-01-01"):
    return np.datetime64(start) + np.arange(n)


def test_three_row_price_csv(tmp_path):
    f = _write(tmp_path / "p.csv", "date,close\n2020-01-01,100\n2020-01-02,101\n2020-01-03,99\n")
    p = load_price_series(f)
    assert len(p) == 3
    assert p.prices.tolist() == [100.0, 101.0, 99.0]
    assert str(p.dates[0]) == "2020-01-01"


def test_zero_price_names_row(tmp_path):
    f = _write(tmp_path / "p.csv", "date,close\n2020-01-01,100\n2020-01-02,0\n2020-01-03,99\n")
    with pytest.raises(DataError, match="row 3"):
        load_price_series(f)


def test_shuffled_rows_equal_sorted(tmp_path):
    rng = np.random.default_rng(3)
    d = _dates(10)
    prices = 100 * np.exp(np.cumsum(rng.normal(0, 0.01, 10)))
    lines = [f"{d[i]},{float(prices[i])!r}" for i in range(10)]
    sorted_f = _write(tmp_path / "a.csv", "date,close\n" + "\n".join(lines) + "\n")
    perm = rng.permutation(10)
    shuf_f = _write(tmp_path / "b.csv", "date,close\n" + "\n".join(lines[i] for i in perm) + "\n")
    a, b = load_price_series(sorted_f), load_price_series(shuf_f)
    assert np.array_equal(a.dates, b.dates)
    assert np.array_equal(a.prices, b.prices)


def test_custom_columns_and_duplicates(tmp_path):
    f = _write(tmp_path / "p.csv", "Day,Px\n2020-01-01,1\n2020-01-02,2\n")
    assert len(load_price_series(f, {"date": "Day", "price": "Px"})) == 2
    with pytest.raises(DataError, match="not found"):
        load_price_series(f)
    g = _write(tmp_path / "d.csv", "date,close\n2020-01-01,1\n2020-01-01,2\n")
    with pytest.raises(DataError, match="duplicate"):
        load_price_series(g)
    h = _write(tmp_path / "bad.csv", "date,close\n01/02/2020,1\n")
    with pytest.raises(DataError, match="row 2"):
        load_price_series(h)
    with pytest.raises(DataError, match="not found"):
        load_price_series(tmp_path / "nope.csv")


def test_return_csv(tmp_path):
    f = _write(tmp_path / "r.csv", "date,return\n2020-01-02,0.01\n2020-01-01,-0.02\n")
    r = load_return_series(f)
    assert r.returns.tolist() == [-0.02, 0.01]


def test_log_returns_examples():
    r = to_log_returns(PriceSeries(_dates(2), [100.0, 100.0]))
    assert r.returns.tolist() == [0.0]
    r = to_log_returns(PriceSeries(_dates(3), [100.0, 101.0, 99.0]))
    assert r.returns[0] == pytest.approx(math.log(1.01), abs=1e-15)
    assert r.returns[1] == pytest.approx(math.log(99 / 101), abs=1e-15)
    assert np.array_equal(r.dates, _dates(3)[1:])
    with pytest.raises(DataError, match="too short"):
        to_log_returns(PriceSeries(_dates(1), [100.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.2, 0.2), min_size=1, max_size=300), st.floats(0.01, 1e4))
def test_returns_reconstruct_prices(steps, p0):
    prices = p0 * np.exp(np.concatenate([[0.0], np.cumsum(steps)]))
    r = to_log_returns(PriceSeries(_dates(prices.size), prices))
    rebuilt = prices[0] * np.exp(np.concatenate([[0.0], np.cumsum(r.returns)]))
    assert np.max(np.abs(rebuilt / prices - 1.0)) < 1e-10


def _series(n=5):
    return ReturnSeries(_dates(n), np.linspace(-0.01, 0.01, n))


def test_align_identical_and_missing():
    r = _series()
    same = align_exogenous(r, ExogenousPanel(r.dates, {"vix": np.arange(5.0)}))
    assert len(same) == 5
    fewer = align_exogenous(r, ExogenousPanel(np.delete(r.dates, 2), {"vix": np.arange(4.0)}))
    assert len(fewer) == 4
    assert r.dates[2] not in fewer.dates


def test_align_missing_cell_dropped_and_disjoint():
    r = _series()
    panel = ExogenousPanel(r.dates, {"vix": np.array([1.0, np.nan, 3.0, 4.0, 5.0])})
    out = align_exogenous(r, panel)
    assert len(out) == 4
    assert r.dates[1] not in out.dates
    with pytest.raises(DataError):
        align_exogenous(r, ExogenousPanel(_dates(3, "2021-01-01"), {"vix": np.ones(3)}))


def test_align_idempotent():
    r = _series(8)
    ds = align_exogenous(r, ExogenousPanel(r.dates[1:], {"a": np.arange(7.0), "b": -np.arange(7.0)}))
    assert align_exogenous(ds, ds.panel) == ds


def test_load_exogenous_blank_cells(tmp_path):
    f = _write(tmp_path / "x.csv", "date,vix,fx\n2020-01-01,20,\n2020-01-02,21,1.1\n")
    panel = load_exogenous(f)
    assert list(panel.columns) == ["vix", "fx"]
    assert np.isnan(panel.columns["fx"][0])
    assert list(load_exogenous(f, names=["vix"]).columns) == ["vix"]


def _report():
    cell = BacktestCell("evar", 0.95, 250, 14, 14 / 250,
                        {"uc": {"stat": 0.1 + 0.2, "p_value": 0.7},
                         "cc": {"stat": 1.0 / 3.0, "p_value": 0.8},
                         "dq": {"stat": 2.5, "p_value": 1e-300}},
                        {"all": 0.12345678901234567, "all_mean": 0.00049, "quadratic": 3e-5},
                        ["a note"])
    return BacktestReport([cell], {"seed": 7})


def test_report_json_contents(tmp_path):
    path = tmp_path / "r.json"
    write_report(_report(), path, "json")
    d = json.loads(path.read_text())
    cell = d["results"][0]
    assert cell["model_id"] == "evar"
    assert cell["n_violations"] == 14
    assert cell["tests"]["uc"]["p_value"] == 0.7
    assert d["meta"]["seed"] == 7


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_round_trip(tmp_path, fmt):
    path = tmp_path / f"r.{fmt}"
    rep = _report()
    write_report(rep, path, fmt)
    assert read_report(path) == rep


def test_report_unwritable(tmp_path):
    with pytest.raises(DataError):
        write_report(_report(), tmp_path / "missing" / "r.json")
    with pytest.raises(DataError):
        write_report(_report(), tmp_path, "json")
    with pytest.raises(DataError):
        write_report(_report(), tmp_path / "r.x", "xml")


def test_type_invariants():
    with pytest.raises(DataError):
        PriceSeries(_dates(2), [1.0, -1.0])
    with pytest.raises(DataError):
        ReturnSeries(_dates(2)[::-1], [0.0, 0.0])
    with pytest.raises(DataError):
        ReturnSeries(_dates(2), [0.0, np.inf])
    r = _series(10)
    assert len(r.between("2020-01-03", "2020-01-05")) == 3
    assert AlignedDataset.from_returns(r).series.returns is r.returns
