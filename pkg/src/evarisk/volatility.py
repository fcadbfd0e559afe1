"""
GARCH(1,1) volatility and the CARE expectile model built on top of it.

The variance recursion is ``s2[t] = omega + alpha*e[t-1]**2 + beta*s2[t-1]``
with raw residuals ``e = r - mu`` and ``s2[0]`` set to the sample variance.
Estimation runs on the series divided by its sample standard deviation and
maps the parameters back, which makes fits scale-equivariant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, signal, special, stats

from .expectile import calibrate_tau, sample_expectile, _check_tau

logger = logging.getLogger(__name__)

MIN_OBS = 250
NU_FLOOR = 2.1


class GarchError(ValueError):
    pass


@dataclass(frozen=True)
class GarchParams:
    omega: float
    alpha_g: float
    beta_g: float
    mean_mu: float = 0.0
    nu: Optional[float] = None

    def validate(self):
        if not self.omega > 0:
            raise GarchError("omega must be positive")
        if self.alpha_g < 0 or self.beta_g < 0:
            raise GarchError("alpha and beta must be non-negative")
        if not self.alpha_g + self.beta_g < 1:
            raise GarchError("alpha + beta must be below 1 for covariance stationarity")
        if self.nu is not None and not self.nu > 2:
            raise GarchError("student-t degrees of freedom must exceed 2")
        return self

    @property
    def persistence(self) -> float:
        return self.alpha_g + self.beta_g

    @property
    def unconditional_variance(self) -> float:
        return self.omega / (1.0 - self.persistence)


@dataclass
class GarchFit:
    params: GarchParams
    cond_variance: np.ndarray
    std_residuals: np.ndarray
    log_likelihood: float
    innovation_dist: str
    residuals: np.ndarray = field(repr=False, default=None)
    at_boundary: bool = False
    converged: bool = True
    history: list = field(repr=False, default_factory=list)

    @property
    def nobs(self) -> int:
        return self.cond_variance.size

    def next_variance(self) -> float:
        """One-step-ahead variance after the last observation."""
        p = self.params
        return p.omega + p.alpha_g * self.residuals[-1] ** 2 + p.beta_g * self.cond_variance[-1]


def _check_dist(dist: str) -> str:
    if dist not in ("normal", "student_t"):
        raise GarchError(f"unknown innovation distribution {dist!r}")
    return dist


def garch_variance(resid, omega, alpha, beta, s2_0) -> np.ndarray:
    """Conditional variance path for the given raw residuals."""
    e = np.asarray(resid, dtype=float)
    out = np.empty(e.size)
    out[0] = s2_0
    if e.size > 1:
        drive = omega + alpha * e[:-1] ** 2
        out[1:], _ = signal.lfilter([1.0], [1.0, -beta], drive, zi=[beta * s2_0])
    return out


def _normal_ll(e, s2):
    return -0.5 * (np.log(2.0 * np.pi) * e.size + np.sum(np.log(s2) + e * e / s2))


def _student_ll(e, s2, nu):
    # unit-variance t density
    const = special.gammaln(0.5 * (nu + 1)) - special.gammaln(0.5 * nu) - 0.5 * np.log(np.pi * (nu - 2))
    return float(e.size * const - 0.5 * np.sum(np.log(s2))
                 - 0.5 * (nu + 1) * np.sum(np.log1p(e * e / (s2 * (nu - 2)))))


def _unpack(theta, dist):
    mu, log_omega, a, b = theta[:4]
    persist = special.expit(a)
    alpha = persist * special.expit(b)
    beta = persist - alpha
    nu = NU_FLOOR + np.exp(theta[4]) if dist == "student_t" else None
    return mu, np.exp(log_omega), alpha, beta, nu


def _pack(mu, omega, alpha, beta, nu=None):
    persist = alpha + beta
    theta = [mu, np.log(omega), special.logit(persist), special.logit(alpha / persist)]
    if nu is not None:
        theta.append(np.log(nu - NU_FLOOR))
    return np.array(theta, dtype=float)


def _loglik(x, mu, omega, alpha, beta, nu, s2_0):
    e = x - mu
    s2 = garch_variance(e, omega, alpha, beta, s2_0)
    if nu is None:
        return _normal_ll(e, s2)
    return _student_ll(e, s2, nu)


def garch_fit(returns, dist: str = "normal", start: Optional[GarchParams] = None,
              maxiter: int = 500) -> GarchFit:
    """
    Fit a constant-mean GARCH(1,1) by (quasi-)maximum likelihood.

    Parameters
    ----------
    returns : array_like or ReturnSeries
        At least 250 observations.
    dist : {"normal", "student_t"}
        Innovation density. With "normal" this is Gaussian QMLE.
    start : GarchParams, optional
        Starting point; defaults to alpha=0.05, beta=0.90 and omega at 5%
        of the sample variance.

    Returns
    -------
    GarchFit
        ``at_boundary`` is set when alpha, beta or the persistence ends up
        numerically pinned to the edge of the admissible region.
    """
    dist = _check_dist(dist)
    r = np.asarray(getattr(returns, "returns", returns), dtype=float).ravel()
    if r.size < MIN_OBS:
        raise GarchError(f"series too short: {r.size} < {MIN_OBS} observations")
    if not np.all(np.isfinite(r)):
        raise GarchError("series contains non-finite values")
    scale = r.std(ddof=1)
    if not scale > 0:
        raise GarchError("degenerate series: zero variance")
    x = r / scale
    s2_0 = x.var(ddof=1)

    if start is None:
        theta0 = _pack(x.mean(), 0.05 * s2_0, 0.05, 0.90, 8.0 if dist == "student_t" else None)
    else:
        theta0 = _pack(start.mean_mu / scale, start.omega / scale ** 2,
                       max(start.alpha_g, 1e-4), max(start.beta_g, 1e-4),
                       (start.nu or 8.0) if dist == "student_t" else None)

    def nll(theta):
        mu, omega, alpha, beta, nu = _unpack(theta, dist)
        val = -_loglik(x, mu, omega, alpha, beta, nu, s2_0)
        return val if np.isfinite(val) else 1e300

    history = []
    res = optimize.minimize(nll, theta0, method="BFGS",
                            callback=lambda th: history.append(-nll(th)),
                            options={"maxiter": maxiter, "gtol": 1e-6})
    theta = res.x
    converged = bool(res.success)
    # BFGS may stop on precision loss near the optimum; a short Nelder-Mead polish
    # only replaces the solution when it improves the objective
    if not res.success:
        polish = optimize.minimize(nll, theta, method="Nelder-Mead",
                                   options={"maxiter": 2000, "xatol": 1e-8, "fatol": 1e-10})
        if polish.fun < res.fun:
            theta = polish.x
            history.append(-polish.fun)
        converged = bool(polish.success)
    mu, omega, alpha, beta, nu = _unpack(theta, dist)

    params = GarchParams(omega=float(omega * scale ** 2), alpha_g=float(alpha),
                         beta_g=float(beta), mean_mu=float(mu * scale),
                         nu=None if nu is None else float(nu))
    e = r - params.mean_mu
    s2 = garch_variance(e, params.omega, params.alpha_g, params.beta_g, r.var(ddof=1))
    ll = (_normal_ll(e, s2) if nu is None else _student_ll(e, s2, nu))
    boundary = bool(alpha < 1e-6 or beta < 1e-6 or alpha + beta > 1 - 1e-6)
    if boundary:
        logger.info("GARCH estimate at parameter boundary: alpha=%.3g beta=%.3g", alpha, beta)
    return GarchFit(
        params=params,
        cond_variance=s2,
        std_residuals=e / np.sqrt(s2),
        log_likelihood=float(ll),
        innovation_dist=dist,
        residuals=e,
        at_boundary=boundary,
        converged=converged,
        history=history,
    )


def garch_filter(returns, params: GarchParams, s2_0: Optional[float] = None) -> GarchFit:
    """Run the variance recursion at fixed parameters (no estimation)."""
    r = np.asarray(getattr(returns, "returns", returns), dtype=float).ravel()
    if s2_0 is None:
        s2_0 = r.var(ddof=1)
    e = r - params.mean_mu
    s2 = garch_variance(e, params.omega, params.alpha_g, params.beta_g, s2_0)
    dist = "normal" if params.nu is None else "student_t"
    ll = _normal_ll(e, s2) if params.nu is None else _student_ll(e, s2, params.nu)
    return GarchFit(params, s2, e / np.sqrt(s2), float(ll), dist, residuals=e)


def standardized_t(nu: float, size, rng) -> np.ndarray:
    return rng.standard_t(nu, size=size) * np.sqrt((nu - 2.0) / nu)


def garch_simulate(params: GarchParams, n: int, dist: str = "normal", seed=None,
                   nu: Optional[float] = None) -> np.ndarray:
    """
    Simulate ``r[t] = mu + sigma[t]*z[t]`` from a GARCH(1,1).

    The recursion starts at the unconditional variance. ``z`` is standard
    normal or a unit-variance Student-t with ``nu`` (or ``params.nu``)
    degrees of freedom.
    """
    params.validate()
    dist = _check_dist(dist)
    if n < 1:
        raise GarchError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if dist == "normal":
        z = rng.standard_normal(n)
    else:
        nu = nu if nu is not None else params.nu
        if nu is None or nu <= 2:
            raise GarchError("student_t simulation needs degrees of freedom > 2")
        z = standardized_t(nu, n, rng)
    omega, a, b = params.omega, params.alpha_g, params.beta_g
    s2 = params.unconditional_variance
    e = np.empty(n)
    for t in range(n):
        if t:
            s2 = omega + a * e[t - 1] ** 2 + b * s2
        e[t] = np.sqrt(s2) * z[t]
    return params.mean_mu + e


def garch_forecast(fit: GarchFit, horizon: int) -> np.ndarray:
    """
    Variance forecasts for horizons ``1..horizon`` after the sample end.

    The first step uses the last residual; later steps iterate
    ``omega + (alpha + beta) * s2``.
    """
    if horizon < 1:
        raise GarchError("horizon must be at least 1")
    p = fit.params
    out = np.empty(horizon)
    out[0] = fit.next_variance()
    persist = p.persistence
    for h in range(1, horizon):
        out[h] = p.omega + persist * out[h - 1]
    return out


@dataclass
class CareFit:
    garch: GarchFit
    tau: float
    xi_tau: float
    evar_path: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.garch.cond_variance)

    def forecast(self, horizon: int = 1) -> np.ndarray:
        """Expectile forecasts ``mu + sigma_{T+h} * xi``."""
        return self.garch.params.mean_mu + np.sqrt(garch_forecast(self.garch, horizon)) * self.xi_tau


def care_from_garch(g: GarchFit, tau: float) -> CareFit:
    tau = _check_tau(tau)
    xi = sample_expectile(g.std_residuals, tau)
    path = g.params.mean_mu + np.sqrt(g.cond_variance) * xi
    return CareFit(garch=g, tau=tau, xi_tau=float(xi), evar_path=path)


def care_fit(returns, tau: Optional[float] = None, dist: str = "normal",
             alpha: Optional[float] = None) -> CareFit:
    """
    Two-step CARE fit: GARCH first, then the standardized expectile.

    Either ``tau`` is given directly, or ``alpha`` (a confidence level) and
    ``tau`` is calibrated on the standardized residuals so the in-sample
    violation rate of the expectile path is ``1 - alpha``.
    """
    if (tau is None) == (alpha is None):
        raise GarchError("give exactly one of tau or alpha")
    g = garch_fit(returns, dist=dist)
    if tau is None:
        tau = calibrate_tau(g.std_residuals, alpha)
    return care_from_garch(g, tau)


def student_t_quantile(prob: float, nu: float) -> float:
    """Quantile of the unit-variance Student-t."""
    return float(stats.t.ppf(prob, nu) * np.sqrt((nu - 2.0) / nu))
