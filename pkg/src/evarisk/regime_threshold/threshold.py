"""Tsay's arranged-autoregression threshold test and threshold expectile models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from ..expectile import expectile_regression, ExpectileError
from ..stats_core import TestResult


class ThresholdError(ValueError):
    pass


def _ar_cases(returns, p: int, delay: int):
    r = np.asarray(getattr(returns, "returns", returns), dtype=float).ravel()
    if p < 1 or delay < 1:
        raise ThresholdError("lag order and delay must be at least 1")
    start = max(p, delay)
    y = r[start:]
    X = np.column_stack([np.ones(y.size)] + [r[start - i:r.size - i] for i in range(1, p + 1)])
    z = r[start - delay:r.size - delay]
    return X, y, z


def threshold_f_statistic(ssr0: float, ssr1: float, k: int, nobs: int) -> float:
    """``((ssr0 - ssr1) / k) / (ssr1 / (nobs - 2k - 1))``."""
    return ((ssr0 - ssr1) / k) / (ssr1 / (nobs - 2 * k - 1))


def _predictive_residuals(X, y, start):
    # recursive least squares; returns standardized one-step predictive residuals
    X0, y0 = X[:start], y[:start]
    P = np.linalg.inv(X0.T @ X0)
    beta = P @ X0.T @ y0
    out = np.empty(y.size - start)
    for i in range(start, y.size):
        x = X[i]
        px = P @ x
        f = 1.0 + x @ px
        e = y[i] - x @ beta
        out[i - start] = e / np.sqrt(f)
        gain = px / f
        beta = beta + gain * e
        P = P - np.outer(gain, px)
    return out


def tsay_threshold_test(returns, delay: int = 1, p: int = 1) -> TestResult:
    """
    Tsay's F test for threshold nonlinearity.

    Cases of the AR(p) regression are arranged by the threshold variable
    ``r[t-delay]`` and fitted by recursive least squares, starting from the
    first ``k + 1`` arranged cases (``k = p + 1``). Under linearity the
    standardized predictive residuals are orthogonal to the regressors.
    ``SSR0`` is their sum of squares and ``SSR1`` the residual sum of squares
    after regressing them on the regressors, giving an F(k, T - 2k - 1)
    statistic with ``T`` the number of arranged cases.
    """
    X, y, z = _ar_cases(returns, p, delay)
    k = p + 1
    T = y.size
    if T <= 4 * k + 20:
        raise ThresholdError(f"insufficient data: {T} cases for k={k}")
    order = np.argsort(z, kind="stable")
    Xs, ys = X[order], y[order]
    if np.linalg.matrix_rank(Xs[:k + 1]) < k:
        raise ThresholdError("degenerate regression in the initial arranged block")
    try:
        e = _predictive_residuals(Xs, ys, k + 1)
    except np.linalg.LinAlgError as exc:
        raise ThresholdError(f"degenerate regression: {exc}") from exc
    Xe = Xs[k + 1:]
    coef, *_ = np.linalg.lstsq(Xe, e, rcond=None)
    ssr0 = float(e @ e)
    resid = e - Xe @ coef
    ssr1 = float(resid @ resid)
    if ssr1 <= 0:
        raise ThresholdError("degenerate regression: zero residual sum of squares")
    F = max(0.0, threshold_f_statistic(ssr0, ssr1, k, T))
    df = (k, T - 2 * k - 1)
    pval = float(stats.f.sf(F, *df))
    return TestResult("tsay", float(F), pval, df, pval < 0.05,
                      note=f"ssr0={ssr0!r};ssr1={ssr1!r}")


def expectile_aic(ssr: float, nobs: int, nparams: int) -> float:
    """``T ln(SSR) + 2k`` with SSR the summed asymmetric squared loss."""
    return nobs * np.log(ssr) + 2 * nparams


@dataclass
class ThresholdModel:
    gamma: float
    delay_d: int
    p: int
    tau: float
    lower: np.ndarray
    upper: np.ndarray
    aic: float
    ssr: float
    n_lower: int
    n_upper: int
    nobs: int
    linear_aic: float
    candidates: list = field(default_factory=list, repr=False)

    @property
    def aic_improvement(self) -> float:
        """Linear-model AIC minus threshold-model AIC (positive favours the threshold)."""
        return self.linear_aic - self.aic


def default_grid(returns, delay: int = 1, p: int = 1, lo: float = 0.15, hi: float = 0.85,
                 num: int = 71) -> np.ndarray:
    """Candidate thresholds at evenly spaced quantiles of the threshold variable."""
    _, _, z = _ar_cases(returns, p, delay)
    return np.quantile(z, np.linspace(lo, hi, num))


def threshold_expectile_grid_search(returns, tau: float, delay: int = 1, p: int = 1,
                                    grid: Optional[Sequence[float]] = None) -> ThresholdModel:
    """
    Two-regime threshold expectile model chosen by AIC over a grid.

    For each candidate ``gamma`` separate expectile autoregressions are fitted
    to cases with ``r[t-delay] <= gamma`` and ``> gamma``. The AIC uses the
    summed asymmetric loss of both sides with ``2(p + 1)`` parameters.
    Candidates leaving fewer than ``10(p + 1)`` cases on a side are skipped.
    Equal AICs resolve to the candidate closest to the median of the
    threshold variable.
    """
    X, y, z = _ar_cases(returns, p, delay)
    k = p + 1
    T = y.size
    grid = default_grid(returns, delay, p) if grid is None else np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ThresholdError("empty threshold grid")
    min_side = 10 * k
    med = float(np.median(z))

    best = None
    candidates = []
    for g in grid:
        lo = z <= g
        n_lo = int(lo.sum())
        if n_lo < min_side or T - n_lo < min_side:
            candidates.append((float(g), np.nan))
            continue
        try:
            f_lo = expectile_regression(X[lo], y[lo], tau)
            f_hi = expectile_regression(X[~lo], y[~lo], tau)
        except ExpectileError:
            candidates.append((float(g), np.nan))
            continue
        ssr = f_lo.loss + f_hi.loss
        aic = expectile_aic(ssr, T, 2 * k)
        candidates.append((float(g), float(aic)))
        key = (aic, abs(g - med))
        if best is None or key < best[0]:
            best = (key, float(g), f_lo, f_hi, ssr, n_lo)
    if best is None:
        raise ThresholdError(f"no candidate leaves {min_side} observations on each side")

    (aic, _), gamma, f_lo, f_hi, ssr, n_lo = best
    lin = expectile_regression(X, y, tau)
    return ThresholdModel(
        gamma=gamma, delay_d=delay, p=p, tau=tau,
        lower=f_lo.coefficients, upper=f_hi.coefficients,
        aic=float(aic), ssr=float(ssr), n_lower=n_lo, n_upper=T - n_lo, nobs=T,
        linear_aic=float(expectile_aic(lin.loss, T, k)),
        candidates=candidates,
    )
