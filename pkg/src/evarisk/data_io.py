"""
CSV ingestion, log-return construction, date alignment and report output.

Input files are comma-separated with a header row and ISO-8601 dates.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np


class DataError(ValueError):
    pass


def _as_dates(dates) -> np.ndarray:
    return np.asarray(dates, dtype="datetime64[D]")


def _check_increasing(dates: np.ndarray, what: str):
    if dates.size > 1 and not np.all(dates[1:] > dates[:-1]):
        raise DataError(f"{what}: dates must be strictly increasing")


@dataclass(frozen=True)
class PriceSeries:
    dates: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        d, p = _as_dates(self.dates), np.asarray(self.prices, dtype=float)
        object.__setattr__(self, "dates", d)
        object.__setattr__(self, "prices", p)
        if d.size != p.size:
            raise DataError("dates and prices differ in length")
        if p.size < 2:
            raise DataError("price series too short: need at least 2 prices")
        _check_increasing(d, "price series")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise DataError("prices must be finite and strictly positive")

    def __len__(self):
        return self.prices.size


@dataclass(frozen=True)
class ReturnSeries:
    dates: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        d, r = _as_dates(self.dates), np.asarray(self.returns, dtype=float)
        object.__setattr__(self, "dates", d)
        object.__setattr__(self, "returns", r)
        if d.size != r.size:
            raise DataError("dates and returns differ in length")
        _check_increasing(d, "return series")
        if not np.all(np.isfinite(r)):
            raise DataError("returns must be finite")

    def __len__(self):
        return self.returns.size

    def between(self, start=None, end=None) -> "ReturnSeries":
        mask = np.ones(self.dates.size, dtype=bool)
        if start is not None:
            mask &= self.dates >= np.datetime64(start, "D")
        if end is not None:
            mask &= self.dates <= np.datetime64(end, "D")
        return ReturnSeries(self.dates[mask], self.returns[mask])


@dataclass(frozen=True)
class ExogenousPanel:
    dates: np.ndarray
    columns: Mapping[str, np.ndarray]

    def __post_init__(self):
        d = _as_dates(self.dates)
        cols = {str(k): np.asarray(v, dtype=float) for k, v in self.columns.items()}
        if len(cols) != len(self.columns):
            raise DataError("column names must be unique")
        for name, v in cols.items():
            if v.size != d.size:
                raise DataError(f"column {name!r} length differs from dates")
        _check_increasing(d, "exogenous panel")
        object.__setattr__(self, "dates", d)
        object.__setattr__(self, "columns", cols)


@dataclass(frozen=True)
class AlignedDataset:
    dates: np.ndarray
    returns: np.ndarray
    exog: Mapping[str, np.ndarray]

    def __len__(self):
        return self.returns.size

    @property
    def series(self) -> ReturnSeries:
        return ReturnSeries(self.dates, self.returns)

    @property
    def panel(self) -> ExogenousPanel:
        return ExogenousPanel(self.dates, dict(self.exog))

    def __eq__(self, other):
        if not isinstance(other, AlignedDataset):
            return NotImplemented
        return (np.array_equal(self.dates, other.dates)
                and np.array_equal(self.returns, other.returns)
                and self.exog.keys() == other.exog.keys()
                and all(np.array_equal(self.exog[k], other.exog[k]) for k in self.exog))

    @classmethod
    def from_returns(cls, r: ReturnSeries) -> "AlignedDataset":
        return cls(r.dates, r.returns, {})


def _read_rows(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        # data rows start on line 2 of the file
        return list(enumerate(reader, start=2)), list(reader.fieldnames)


def _parse_date(text, lineno):
    try:
        return dt.date.fromisoformat(text.strip())
    except (ValueError, AttributeError):
        raise DataError(f"row {lineno}: unparseable date {text!r}") from None


def _parse_float(text, lineno, name):
    if text is None or text.strip() == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {lineno}: unparseable {name} value {text!r}") from None


def _sorted_unique(dates, linenos):
    order = np.argsort(np.asarray(dates, dtype="datetime64[D]"), kind="stable")
    d = np.asarray(dates, dtype="datetime64[D]")[order]
    dup = np.nonzero(d[1:] == d[:-1])[0]
    if dup.size:
        i = order[dup[0] + 1]
        raise DataError(f"row {linenos[i]}: duplicate date {d[dup[0]]}")
    return d, order


def load_price_series(path, columns: Optional[Mapping[str, str]] = None) -> PriceSeries:
    """
    Read a date/price CSV.

    ``columns`` maps ``"date"`` and ``"price"`` to header names (defaults
    ``date`` and ``close``). Rows may come in any order; they are sorted.
    """
    cfg = {"date": "date", "price": "close"}
    cfg.update(columns or {})
    rows, header = _read_rows(path)
    for key in ("date", "price"):
        if cfg[key] not in header:
            raise DataError(f"{path}: column {cfg[key]!r} not found in header {header}")
    dates, prices, lines = [], [], []
    for lineno, row in rows:
        d = _parse_date(row[cfg["date"]], lineno)
        p = _parse_float(row[cfg["price"]], lineno, "price")
        if not (np.isfinite(p) and p > 0):
            raise DataError(f"row {lineno}: price must be positive, got {row[cfg['price']]!r}")
        dates.append(d)
        prices.append(p)
        lines.append(lineno)
    d, order = _sorted_unique(dates, lines)
    return PriceSeries(d, np.asarray(prices)[order])


def load_return_series(path, columns: Optional[Mapping[str, str]] = None) -> ReturnSeries:
    """Read a date/return CSV (default columns ``date`` and ``return``)."""
    cfg = {"date": "date", "return": "return"}
    cfg.update(columns or {})
    rows, header = _read_rows(path)
    for key in ("date", "return"):
        if cfg[key] not in header:
            raise DataError(f"{path}: column {cfg[key]!r} not found in header {header}")
    dates, vals, lines = [], [], []
    for lineno, row in rows:
        dates.append(_parse_date(row[cfg["date"]], lineno))
        v = _parse_float(row[cfg["return"]], lineno, "return")
        if not np.isfinite(v):
            raise DataError(f"row {lineno}: return must be finite")
        vals.append(v)
        lines.append(lineno)
    d, order = _sorted_unique(dates, lines)
    return ReturnSeries(d, np.asarray(vals)[order])


def load_exogenous(path, date_column: str = "date", names=None) -> ExogenousPanel:
    """Read named exogenous columns; empty cells become NaN and are dropped at alignment."""
    rows, header = _read_rows(path)
    if date_column not in header:
        raise DataError(f"{path}: column {date_column!r} not found in header {header}")
    names = [h for h in header if h != date_column] if names is None else list(names)
    missing = [n for n in names if n not in header]
    if missing:
        raise DataError(f"{path}: columns {missing} not found in header {header}")
    dates, lines = [], []
    data = {n: [] for n in names}
    for lineno, row in rows:
        dates.append(_parse_date(row[date_column], lineno))
        lines.append(lineno)
        for n in names:
            data[n].append(_parse_float(row[n], lineno, n))
    d, order = _sorted_unique(dates, lines)
    return ExogenousPanel(d, {n: np.asarray(v)[order] for n, v in data.items()})


def to_log_returns(p: PriceSeries) -> ReturnSeries:
    """``r[t] = ln P[t+1] - ln P[t]``, dated by the later price."""
    if len(p) < 2:
        raise DataError("price series too short")
    return ReturnSeries(p.dates[1:], np.diff(np.log(p.prices)))


def align_exogenous(r, x: ExogenousPanel) -> AlignedDataset:
    """
    Restrict returns and exogenous columns to their common dates.

    No lagging happens here. Rows with a missing exogenous cell are dropped.
    If ``r`` is already an AlignedDataset its columns are kept, with
    same-named columns from ``x`` taking precedence.
    """
    if isinstance(r, AlignedDataset):
        base_cols = dict(r.exog)
    else:
        base_cols = {}
    if len(r.dates) == 0 or len(x.dates) == 0:
        raise DataError("cannot align empty inputs")
    common, ir, ix = np.intersect1d(r.dates, x.dates, assume_unique=True, return_indices=True)
    if common.size == 0:
        raise DataError("returns and exogenous panel share no dates")
    cols = {k: v[ir] for k, v in base_cols.items()}
    cols.update({k: v[ix] for k, v in x.columns.items()})
    keep = np.ones(common.size, dtype=bool)
    for v in cols.values():
        keep &= np.isfinite(v)
    if not keep.any():
        raise DataError("no complete rows after alignment")
    return AlignedDataset(common[keep], np.asarray(r.returns)[ir][keep],
                          {k: v[keep] for k, v in cols.items()})


def write_series_csv(path, dates, columns: Dict[str, np.ndarray]):
    """Write a dated table with full float precision."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *columns])
        for i, d in enumerate(np.asarray(dates, dtype="datetime64[D]")):
            w.writerow([str(d), *(repr(float(v[i])) for v in columns.values())])


# --- reports -----------------------------------------------------------------

_CSV_FIELDS = ["model_id", "alpha", "n_obs", "n_violations", "violation_rate",
               "uc_stat", "uc_p_value", "cc_stat", "cc_p_value", "dq_stat", "dq_p_value",
               "loss_all", "loss_all_mean", "loss_quadratic", "notes"]


def _flatten(cell: dict) -> dict:
    row = {k: cell[k] for k in ("model_id", "alpha", "n_obs", "n_violations", "violation_rate")}
    for t in ("uc", "cc", "dq"):
        row[f"{t}_stat"] = cell["tests"][t]["stat"]
        row[f"{t}_p_value"] = cell["tests"][t]["p_value"]
    row["loss_all"] = cell["losses"]["all"]
    row["loss_all_mean"] = cell["losses"]["all_mean"]
    row["loss_quadratic"] = cell["losses"]["quadratic"]
    row["notes"] = ";".join(cell.get("notes", []))
    return row


def _unflatten(row: dict) -> dict:
    f = float
    return {
        "model_id": row["model_id"],
        "alpha": f(row["alpha"]),
        "n_obs": int(row["n_obs"]),
        "n_violations": int(row["n_violations"]),
        "violation_rate": f(row["violation_rate"]),
        "tests": {t: {"stat": f(row[f"{t}_stat"]), "p_value": f(row[f"{t}_p_value"])}
                  for t in ("uc", "cc", "dq")},
        "losses": {"all": f(row["loss_all"]), "all_mean": f(row["loss_all_mean"]),
                   "quadratic": f(row["loss_quadratic"])},
        "notes": [s for s in row["notes"].split(";") if s],
    }


def write_report(report, path, format: str = "json"):
    """
    Serialise a BacktestReport as JSON or CSV.

    Floats are written with ``repr`` so every numeric field reads back
    bit-identical. CSV output carries the report metadata as one leading
    ``# meta:`` comment line holding JSON.
    """
    data = report.to_dict()
    path = Path(path)
    try:
        if format == "json":
            with open(path, "w") as fh:
                json.dump(data, fh, indent=2, sort_keys=True)
                fh.write("\n")
        elif format == "csv":
            with open(path, "w", newline="") as fh:
                fh.write("# meta: " + json.dumps(data["meta"], sort_keys=True) + "\n")
                w = csv.DictWriter(fh, fieldnames=_CSV_FIELDS, lineterminator="\n")
                w.writeheader()
                for cell in data["results"]:
                    row = _flatten(cell)
                    w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
        else:
            raise DataError(f"unknown report format {format!r}")
    except OSError as exc:
        raise DataError(f"cannot write report to {path}: {exc}") from exc


def read_report(path):
    """Inverse of :func:`write_report`; the format is inferred from the content."""
    from .backtest import BacktestReport

    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return BacktestReport.from_dict(json.loads(text))
    lines = text.splitlines()
    meta = {}
    if lines and lines[0].startswith("# meta: "):
        meta = json.loads(lines[0][len("# meta: "):])
        lines = lines[1:]
    cells = [_unflatten(row) for row in csv.DictReader(lines)]
    return BacktestReport.from_dict({"meta": meta, "results": cells})
