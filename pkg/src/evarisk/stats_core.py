"""Descriptive statistics and the normality, unit-root and ARCH diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats
from statsmodels.tsa.adfvalues import mackinnonp


class StatsError(ValueError):
    pass


@dataclass
class TestResult:
    """Outcome of a hypothesis test; ``df`` holds the degrees of freedom or lag count."""

    name: str
    statistic: float
    p_value: float
    df: object
    decision_at_5pct: bool
    critical_values: Optional[dict] = None
    note: str = ""

    __test__ = False  # not a pytest class

    def as_dict(self) -> dict:
        return {"stat": self.statistic, "p_value": self.p_value}


@dataclass
class DescriptiveStats:
    n: int
    mean: float
    std_dev: float
    skewness: float
    kurtosis: float
    min: float
    max: float

    @property
    def excess_kurtosis(self) -> float:
        return self.kurtosis - 3.0


def _values(r) -> np.ndarray:
    x = np.asarray(getattr(r, "returns", r), dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise StatsError("series contains non-finite values")
    return x


def descriptive_stats(r) -> DescriptiveStats:
    """
    Sample moments with an ``n - 1`` standard deviation.

    Skewness and kurtosis are the standardized third and fourth central
    moments (population normalisation, kurtosis not in excess form).
    """
    x = _values(r)
    n = x.size
    if n < 2:
        raise StatsError("series too short: need at least 2 observations")
    mean = x.mean()
    d = x - mean
    m2 = np.mean(d ** 2)
    if m2 == 0:
        raise StatsError("zero variance: skewness and kurtosis undefined")
    return DescriptiveStats(
        n=n,
        mean=float(mean),
        std_dev=float(np.sqrt(np.sum(d ** 2) / (n - 1))),
        skewness=float(np.mean(d ** 3) / m2 ** 1.5),
        kurtosis=float(np.mean(d ** 4) / m2 ** 2),
        min=float(x.min()),
        max=float(x.max()),
    )


def jarque_bera_from_moments(n: int, skewness: float, kurtosis: float) -> float:
    return n / 6.0 * (skewness ** 2 + (kurtosis - 3.0) ** 2 / 4.0)


def jarque_bera(r) -> TestResult:
    x = _values(r)
    if x.size < 8:
        raise StatsError("Jarque-Bera needs at least 8 observations")
    ds = descriptive_stats(x)
    jb = jarque_bera_from_moments(ds.n, ds.skewness, ds.kurtosis)
    p = float(stats.chi2.sf(jb, 2))
    return TestResult("jarque_bera", float(jb), p, 2, p < 0.05)


# Constant-only Dickey-Fuller critical values by sample size (Fuller 1976).
_ADF_SIZES = np.array([25.0, 50.0, 100.0, 250.0, 500.0])
_ADF_TABLE = {
    "1%": (np.array([-3.75, -3.58, -3.51, -3.46, -3.44]), -3.43),
    "5%": (np.array([-3.00, -2.93, -2.89, -2.88, -2.87]), -2.86),
    "10%": (np.array([-2.63, -2.60, -2.58, -2.57, -2.57]), -2.57),
}


def adf_critical_values(nobs: int) -> dict:
    """
    Tabulated critical values, linear in sample size up to 500 and linear in
    ``1/n`` between 500 and the asymptotic row.
    """
    out = {}
    for level, (finite, asym) in _ADF_TABLE.items():
        if nobs <= _ADF_SIZES[-1]:
            out[level] = float(np.interp(nobs, _ADF_SIZES, finite))
        else:
            w = _ADF_SIZES[-1] / nobs
            out[level] = float(asym + w * (finite[-1] - asym))
    return out


def _ols(X, y):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return beta, resid


def adf_test(r, lags: int = 1) -> TestResult:
    """
    Augmented Dickey-Fuller test with a constant.

    Regresses ``dy[t]`` on ``1, y[t-1], dy[t-1..t-lags]``; the statistic is the
    t-ratio on ``y[t-1]``. The decision compares it to the tabulated 5%
    critical value; the p-value is MacKinnon's response-surface approximation.
    """
    y = _values(r)
    n = y.size
    if lags < 0:
        raise StatsError("lags must be non-negative")
    if n <= lags + 10:
        raise StatsError("insufficient observations for the requested lags")
    dy = np.diff(y)
    rows = dy.size - lags
    X = [np.ones(rows), y[lags:-1]]
    for i in range(1, lags + 1):
        X.append(dy[lags - i:dy.size - i])
    X = np.column_stack(X)
    target = dy[lags:]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise StatsError("degenerate ADF regression (constant or collinear series)")
    beta, resid = _ols(X, target)
    dof = rows - X.shape[1]
    s2 = resid @ resid / dof
    if s2 <= 0:
        raise StatsError("degenerate ADF regression: zero residual variance")
    cov = s2 * np.linalg.inv(X.T @ X)
    stat = float(beta[1] / np.sqrt(cov[1, 1]))
    crit = adf_critical_values(rows)
    p = float(np.clip(mackinnonp(stat, regression="c", N=1), 0.0, 1.0))
    return TestResult("adf", stat, p, lags, stat < crit["5%"], critical_values=crit)


def arch_lm_test(r, lags: int = 5) -> TestResult:
    """Engle's ARCH-LM: ``nobs * R^2`` from regressing squared demeaned returns on their lags."""
    x = _values(r)
    n = x.size
    if lags < 1:
        raise StatsError("lags must be at least 1")
    if n <= lags + 10:
        raise StatsError("insufficient observations for the requested lags")
    e2 = (x - x.mean()) ** 2
    y = e2[lags:]
    X = np.column_stack([np.ones(y.size)] + [e2[lags - i:n - i] for i in range(1, lags + 1)])
    _, resid = _ols(X, y)
    tss = np.sum((y - y.mean()) ** 2)
    if tss == 0:
        raise StatsError("degenerate series: squared returns are constant")
    r2 = 1.0 - resid @ resid / tss
    stat = float(y.size * r2)
    p = float(stats.chi2.sf(stat, lags))
    return TestResult("arch_lm", stat, p, lags, p < 0.05)


def flag_outliers(r, k: float = 3.5) -> np.ndarray:
    """
    Boolean mask of observations beyond ``k`` interquartile ranges outside
    the quartiles. Diagnostic only; nothing downstream drops flagged rows.
    """
    x = _values(r)
    q1, q3 = np.percentile(x, [25, 75])
    iqr = q3 - q1
    return (x < q1 - k * iqr) | (x > q3 + k * iqr)


def summary_table(r, adf_lags: int = 1, arch_lags: int = 5) -> list:
    """Rows ``(label, value)`` in the layout of a return-series summary table."""
    ds = descriptive_stats(r)
    jb = jarque_bera(r)
    adf = adf_test(r, adf_lags)
    arch = arch_lm_test(r, arch_lags)
    return [
        ("Observations", ds.n),
        ("Mean", ds.mean),
        ("Standard Deviation", ds.std_dev),
        ("Skewness", ds.skewness),
        ("Kurtosis", ds.kurtosis),
        ("Excess Kurtosis", ds.excess_kurtosis),
        ("Minimum", ds.min),
        ("Maximum", ds.max),
        ("Jarque-Bera", jb.statistic),
        ("Jarque-Bera p-value", jb.p_value),
        (f"ADF Test ({adf_lags})", adf.statistic),
        ("ADF p-value", adf.p_value),
        (f"ARCH-LM ({arch_lags})", arch.statistic),
        ("ARCH-LM p-value", arch.p_value),
        ("Outliers (3.5 IQR)", int(flag_outliers(r).sum())),
    ]
