"""Peaks-over-threshold diagnostics: mean excess curve and GPD maximum likelihood."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)

MIN_EXCEEDANCES = 30


class EvtError(ValueError):
    pass


@dataclass
class MeanExcessPoint:
    threshold: float
    mean_excess: float
    count: int
    flagged: bool = False


def mean_excess_curve(xs, thresholds) -> list:
    """
    Empirical mean excess ``e(u) = mean(x - u | x > u)`` with exceedance counts.

    Thresholds at or above the sample maximum have no exceedances; they are
    returned flagged with a zero count and NaN mean excess.
    """
    x = np.asarray(xs, dtype=float).ravel()
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise EvtError("losses must be a non-empty finite sample")
    out = []
    for u in np.asarray(thresholds, dtype=float).ravel():
        exc = x[x > u] - u
        if exc.size == 0:
            logger.info("threshold %g is not below the sample maximum", u)
            out.append(MeanExcessPoint(float(u), float("nan"), 0, True))
        else:
            out.append(MeanExcessPoint(float(u), float(exc.mean()), int(exc.size)))
    return out


@dataclass
class GpdFit:
    threshold: float
    xi: float
    sigma_u: float
    n_exceedances: int
    log_likelihood: float

    @property
    def modified_scale(self) -> float:
        """``sigma_u - xi * u``; constant across thresholds when the GPD tail holds."""
        return self.sigma_u - self.xi * self.threshold


def gpd_loglik(excesses, xi: float, sigma: float) -> float:
    y = np.asarray(excesses, dtype=float)
    if sigma <= 0:
        return -np.inf
    if abs(xi) < 1e-12:
        return float(-y.size * np.log(sigma) - y.sum() / sigma)
    z = 1.0 + xi * y / sigma
    if np.any(z <= 0):
        return -np.inf
    return float(-y.size * np.log(sigma) - (1.0 + 1.0 / xi) * np.sum(np.log(z)))


def _profile(theta, y):
    # profile log-likelihood in theta = xi / sigma; xi(theta) has a closed form
    n = y.size
    if abs(theta) < 1e-14:
        return -n * np.log(y.mean()) - n, 0.0
    xi = np.mean(np.log1p(theta * y))
    if xi == 0 or xi / theta <= 0:
        return -np.inf, xi
    return -n * np.log(xi / theta) - n * xi - n, xi


def gpd_fit(excesses, threshold: float = 0.0) -> GpdFit:
    """
    Maximum-likelihood generalized Pareto fit to threshold excesses.

    Uses the reparametrisation ``theta = xi / sigma``: for fixed ``theta``
    the shape maximiser is ``mean(log(1 + theta*y))`` and ``sigma = xi/theta``,
    leaving a one-dimensional profile likelihood. The search is restricted
    to ``xi > -1``, where the likelihood is bounded.
    """
    y = np.asarray(excesses, dtype=float).ravel()
    if y.size < MIN_EXCEEDANCES:
        raise EvtError(f"too few exceedances: {y.size} < {MIN_EXCEEDANCES}")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise EvtError("excesses must be finite and strictly positive")
    if np.ptp(y) == 0:
        raise EvtError("degenerate excesses: all values equal")
    ymax, ybar = y.max(), y.mean()

    def xi_of(theta):
        return np.mean(np.log1p(theta * y))

    # lower edge: where xi(theta) = -1, or the support bound -1/ymax
    t_lo = -1.0 / ymax * (1.0 - 1e-12)
    if xi_of(t_lo) < -1.0:
        t_lo = optimize.brentq(lambda t: xi_of(t) + 1.0, t_lo, 0.0, xtol=1e-14 / ymax)
    t_hi = 1e4 / ybar
    grid = np.concatenate([np.linspace(t_lo, 0.0, 200, endpoint=False)[1:],
                           np.geomspace(1e-6 / ybar, t_hi, 400)])
    vals = np.array([_profile(t, y)[0] for t in grid])
    i = int(np.nanargmax(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, grid.size - 1)]
    res = optimize.minimize_scalar(lambda t: -_profile(t, y)[0], bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-12 * max(abs(a), abs(b), 1.0 / ybar)})
    theta = res.x if -res.fun >= vals[i] else grid[i]
    # the exponential limit sits between the grid halves
    ll_exp = _profile(0.0, y)[0]
    ll, xi = _profile(theta, y)
    if ll_exp >= ll:
        return GpdFit(float(threshold), 0.0, float(ybar), int(y.size), float(ll_exp))
    return GpdFit(float(threshold), float(xi), float(xi / theta), int(y.size), float(ll))


def fit_tail(xs, threshold: float) -> GpdFit:
    """GPD fit to the exceedances of ``xs`` over ``threshold``."""
    x = np.asarray(xs, dtype=float).ravel()
    return gpd_fit(x[x > threshold] - threshold, threshold)


def parameter_stability(xs, thresholds) -> list:
    """
    Shape and modified scale across thresholds, as table rows
    ``(u, xi, sigma_u, modified_scale, n)``. Thresholds with too few
    exceedances are skipped.
    """
    rows = []
    for u in np.asarray(thresholds, dtype=float).ravel():
        try:
            f = fit_tail(xs, u)
        except EvtError:
            continue
        rows.append((f.threshold, f.xi, f.sigma_u, f.modified_scale, f.n_exceedances))
    return rows
