"""
Expectiles: sample expectiles, asymmetric least squares regression,
coherence checks and the expectile-level / confidence-level calibration.

An expectile at level ``tau`` minimises the asymmetrically weighted squared
loss ``sum |tau - 1{x <= m}| (x - m)^2``. All estimators here are exact or
iterate to a fixed point of that first-order condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


STANDARD_TAUS = (0.01, 0.025, 0.05, 0.10, 0.90, 0.95, 0.975, 0.99)


class ExpectileError(ValueError):
    pass


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ExpectileError(f"expectile level must lie in (0, 1), got {tau}")
    return tau


def _as_finite(xs, name="xs") -> np.ndarray:
    x = np.asarray(xs, dtype=float).ravel()
    if x.size == 0:
        raise ExpectileError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise ExpectileError(f"{name} contains non-finite values")
    return x


def asymmetric_squared_loss(residuals, tau: float, weights=None) -> float:
    """Sum of ``|tau - 1{u <= 0}| u^2`` over residuals ``u = y - m``."""
    u = np.asarray(residuals, dtype=float)
    w = np.where(u <= 0.0, 1.0 - tau, tau)
    if weights is not None:
        w = w * np.asarray(weights, dtype=float)
    return float(np.sum(w * u * u))


def sample_expectile(xs, tau: float) -> float:
    """
    Exact sample expectile.

    The balance function ``G(m) = tau*sum(x-m)_+ - (1-tau)*sum(m-x)_+`` is
    continuous, piecewise linear and strictly decreasing, so the root lies in
    one gap between consecutive order statistics where it has a closed form.

    Parameters
    ----------
    xs : array_like
        Finite observations.
    tau : float
        Level in (0, 1).

    Returns
    -------
    float
    """
    tau = _check_tau(tau)
    x = np.sort(_as_finite(xs))
    n = x.size
    if x[0] == x[-1]:
        return float(x[0])
    # center for cancellation-free partial sums; expectiles are translation equivariant
    shift = x.mean()
    z = x - shift
    csum = np.cumsum(z)
    total = csum[-1]
    idx = np.arange(n)
    upper = (total - csum) - (n - 1 - idx) * z
    lower = (idx + 1) * z - csum
    g = tau * upper - (1.0 - tau) * lower
    # first order statistic at which the balance is non-positive; g[0] > 0 here
    i = int(np.argmax(g <= 0.0))
    s_lo = csum[i - 1]
    s_hi = total - s_lo
    m = (tau * s_hi + (1.0 - tau) * s_lo) / (tau * (n - i) + (1.0 - tau) * i)
    m = min(max(m, z[i - 1]), z[i])
    return float(m + shift)


def expectile_curve(xs, taus: Sequence[float]) -> np.ndarray:
    """Sample expectiles at sorted levels ``taus``; the result is non-decreasing."""
    t = np.asarray(taus, dtype=float).ravel()
    if t.size > 1 and np.any(np.diff(t) < 0):
        raise ExpectileError("taus must be sorted in ascending order")
    x = _as_finite(xs)
    out = np.array([sample_expectile(x, tau) for tau in t])
    # guard against last-ulp inversions between adjacent levels
    return np.maximum.accumulate(out)


def foc_residual(xs, m: float, tau: float) -> float:
    """``tau*sum_{x>m}(x-m) - (1-tau)*sum_{x<=m}(m-x)``; zero at the expectile."""
    x = np.asarray(xs, dtype=float)
    d = x - m
    return float(tau * d[d > 0].sum() - (1.0 - tau) * (-d[d <= 0]).sum())


@dataclass
class ExpectileFit:
    tau: float
    coefficients: np.ndarray
    fitted: np.ndarray
    loss: float
    iterations: int
    converged: bool
    names: Optional[list] = None
    weights: np.ndarray = field(default=None, repr=False)
    response: np.ndarray = field(default=None, repr=False)

    @property
    def residuals(self) -> np.ndarray:
        return self.response - self.fitted

    def coef_dict(self) -> dict:
        names = self.names or [f"x{i}" for i in range(len(self.coefficients))]
        return dict(zip(names, self.coefficients.tolist()))


def _wls(X, y, w):
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return beta


def expectile_regression(design, response, tau: float, obs_weights=None,
                         max_iter: int = 200, tol: float = 1e-8,
                         names=None) -> ExpectileFit:
    """
    Linear expectile regression by iteratively reweighted least squares.

    Each pass solves a weighted least-squares problem with weights
    ``|tau - 1{residual <= 0}|`` (times optional observation weights).
    Iteration stops once the weight pattern repeats or the largest
    coefficient change drops below ``tol``.

    Parameters
    ----------
    design : (n, k) array_like
        Regressors, including the intercept column if one is wanted.
    response : (n,) array_like
    tau : float
    obs_weights : (n,) array_like, optional
        Non-negative observation weights (e.g. regime probabilities).
    max_iter, tol : int, float
        Non-convergence is reported through ``converged=False``, not raised.

    Returns
    -------
    ExpectileFit
    """
    tau = _check_tau(tau)
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(response, dtype=float).ravel()
    n, k = X.shape
    if n != y.size:
        raise ExpectileError("design rows and response length differ")
    if n <= k:
        raise ExpectileError("need more observations than regressors")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ExpectileError("design or response contains non-finite values")
    ow = np.ones(n) if obs_weights is None else np.asarray(obs_weights, dtype=float).ravel()
    if ow.size != n or np.any(ow < 0):
        raise ExpectileError("observation weights must be non-negative, one per row")
    if np.linalg.matrix_rank(X * np.sqrt(ow)[:, None]) < k:
        raise ExpectileError("design matrix is rank deficient")

    beta = _wls(X, y, ow)
    below = (y - X @ beta) <= 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = ow * np.where(below, 1.0 - tau, tau)
        new = _wls(X, y, w)
        new_below = (y - X @ new) <= 0.0
        step = np.max(np.abs(new - beta))
        beta = new
        if np.array_equal(new_below, below) or step < tol:
            below = new_below
            converged = True
            break
        below = new_below

    fitted = X @ beta
    return ExpectileFit(
        tau=tau,
        coefficients=beta,
        fitted=fitted,
        loss=asymmetric_squared_loss(y - fitted, tau, ow),
        iterations=it,
        converged=converged,
        names=list(names) if names is not None else None,
        weights=ow,
        response=y,
    )


def lagged_design(returns, p: int, exog=None, exog_names=None, exog_lag: int = 1):
    """
    Build the autoregressive expectile design.

    Row ``t`` holds ``[1, r_{t-1}, ..., r_{t-p}, z_{t-exog_lag}...]`` and the
    response is ``r_t``. The first ``max(p, exog_lag)`` dates are dropped.

    Returns
    -------
    X : ndarray, y : ndarray, names : list of str, start : int
        ``start`` is the index of the first response in ``returns``.
    """
    r = np.asarray(returns, dtype=float).ravel()
    if exog is None:
        cols = []
    else:
        z = np.asarray(exog, dtype=float)
        cols = list((z[:, None] if z.ndim == 1 else z).T)
    for c in cols:
        if c.size != r.size:
            raise ExpectileError("exogenous columns must match the return length")
    start = max(p, exog_lag if cols else 0)
    if r.size - start <= 1 + p + len(cols):
        raise ExpectileError("series too short for the requested lag structure")
    n = r.size - start
    parts = [np.ones(n)]
    names = ["intercept"]
    for i in range(1, p + 1):
        parts.append(r[start - i:r.size - i])
        names.append(f"lag{i}")
    if exog_names is None:
        exog_names = [f"z{j + 1}" for j in range(len(cols))]
    for c, nm in zip(cols, exog_names):
        parts.append(c[start - exog_lag:r.size - exog_lag])
        names.append(nm)
    return np.column_stack(parts), r[start:], names, start


@dataclass
class CoherenceReport:
    tau: float
    translation_error: float
    homogeneity_error: float
    monotonicity_holds: bool
    subadditivity_holds: Optional[bool]
    subadditivity_gap: float

    @property
    def all_hold(self) -> bool:
        sub = True if self.subadditivity_holds is None else self.subadditivity_holds
        return self.monotonicity_holds and sub


def check_coherence(x, y, tau: float, c: float = 1.0, lam: float = 2.0,
                    rtol: float = 1e-10) -> CoherenceReport:
    """
    Numerically check the four coherence axioms on a pair of samples.

    Translation and homogeneity are reported as absolute errors. Monotonicity
    uses the dominated pair ``(min(x, y), max(x, y))``. Subadditivity is only
    asserted for ``tau >= 0.5``; below that expectiles are superadditive and
    ``subadditivity_holds`` is ``None``.
    """
    tau = _check_tau(tau)
    x = _as_finite(x, "x")
    y = _as_finite(y, "y")
    if x.size != y.size:
        raise ExpectileError("paired samples must have equal length")
    if lam <= 0:
        raise ExpectileError("homogeneity factor must be positive")

    ex = sample_expectile(x, tau)
    ey = sample_expectile(y, tau)
    trans = abs(sample_expectile(x + c, tau) - (ex + c))
    homog = abs(sample_expectile(lam * x, tau) - lam * ex)
    lo, hi = np.minimum(x, y), np.maximum(x, y)
    mono = sample_expectile(lo, tau) <= sample_expectile(hi, tau)
    exy = sample_expectile(x + y, tau)
    gap = exy - (ex + ey)
    slack = rtol * (abs(ex) + abs(ey) + 1.0)
    sub = bool(gap <= slack) if tau >= 0.5 else None
    return CoherenceReport(tau, trans, homog, bool(mono), sub, gap)


def calibrate_tau(residuals, alpha: float, max_iter: int = 200) -> float:
    """
    Expectile level whose sample expectile is violated at rate ``1 - alpha``.

    A violation is a residual strictly below the expectile. Bisection over
    ``tau`` targets the count ``round((1 - alpha) * n)``; the violation count
    is a non-decreasing step function of ``tau``.
    """
    x = _as_finite(residuals, "residuals")
    n = x.size
    if n < 100:
        raise ExpectileError("calibration needs at least 100 residuals")
    if not 0.0 < alpha < 1.0:
        raise ExpectileError("confidence level must lie in (0, 1)")
    if x.min() == x.max():
        raise ExpectileError("target violation rate unreachable: residuals are identical")
    xs = np.sort(x)
    target = int(np.clip(round((1.0 - alpha) * n), 1, n - 1))

    def count(tau):
        return int(np.searchsorted(xs, sample_expectile(xs, tau), side="left"))

    lo, hi = 0.0, 1.0
    best_tau, best_gap = 0.5, None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        c = count(mid)
        gap = abs(c - target)
        if best_gap is None or gap < best_gap:
            best_tau, best_gap = mid, gap
        if c == target:
            return mid
        if c < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return best_tau


def violation_rate(xs, threshold: float) -> float:
    x = np.asarray(xs, dtype=float)
    return float(np.mean(x < threshold))
