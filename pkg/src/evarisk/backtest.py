"""
Rolling one-step VaR forecasts for five model families and the evaluation
battery: violation counts, Kupiec UC, Christoffersen CC, the dynamic
quantile test and two loss functions.

VaR forecasts live in return space, so a 95% VaR is a low (usually
negative) return and a violation is ``r[t] < VaR[t]``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import special, stats

from .data_io import AlignedDataset, DataError, ReturnSeries
from .expectile import calibrate_tau, sample_expectile
from .stats_core import TestResult
from .volatility import GarchError, GarchFit, garch_fit, student_t_quantile

logger = logging.getLogger(__name__)

FAMILIES = ("historical_sim", "parametric_normal", "garch_t", "filtered_hs", "evar")
_GARCH_DIST = {"parametric_normal": "normal", "garch_t": "student_t",
               "filtered_hs": "normal", "evar": "normal"}


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class VarModelSpec:
    """
    One forecasting model.

    ``window`` defaults to 250 for historical simulation and 1000 for the
    GARCH-based families. GARCH parameters are re-estimated every
    ``refit_every`` forecasts and filtered forward in between.
    ``variance="constant"`` replaces the GARCH filter by its alpha = beta = 0
    special case (window mean and variance, refreshed at every forecast);
    it applies to the normal-based families only.
    """

    family: str
    alpha: float = 0.95
    window: Optional[int] = None
    refit_every: int = 25
    name: Optional[str] = None
    variance: str = "garch"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BacktestError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        if self.window is None:
            object.__setattr__(self, "window", 250 if self.family == "historical_sim" else 1000)
        if self.window < 250:
            raise BacktestError("estimation window must be at least 250 observations")
        if not 0.5 < self.alpha < 1:
            raise BacktestError("confidence level must lie in (0.5, 1)")
        if self.refit_every < 1:
            raise BacktestError("refit_every must be positive")
        if self.variance not in ("garch", "constant"):
            raise BacktestError("variance must be 'garch' or 'constant'")
        if self.variance == "constant" and _GARCH_DIST.get(self.family) != "normal":
            raise BacktestError(f"constant variance is not available for {self.family}")

    @property
    def model_id(self) -> str:
        return self.name or self.family


@dataclass
class VarForecastSeries:
    dates: np.ndarray
    var_forecasts: np.ndarray
    model_id: str
    alpha: float
    notes: List[str] = field(default_factory=list)
    taus: Optional[np.ndarray] = None

    def __len__(self):
        return self.var_forecasts.size


def _dataset(data):
    if isinstance(data, AlignedDataset):
        return data.dates, np.asarray(data.returns, dtype=float)
    if isinstance(data, ReturnSeries):
        return data.dates, data.returns
    raise BacktestError("data must be an AlignedDataset or ReturnSeries")


def eval_indices(dates, eval_range=None, window: int = 0) -> np.ndarray:
    """Indices of dates inside the inclusive ``(start, end)`` range."""
    dates = np.asarray(dates, dtype="datetime64[D]")
    if eval_range is None:
        idx = np.arange(window, dates.size)
    else:
        start, end = eval_range
        mask = np.ones(dates.size, dtype=bool)
        if start is not None:
            mask &= dates >= np.datetime64(start, "D")
        if end is not None:
            mask &= dates <= np.datetime64(end, "D")
        idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise BacktestError("evaluation range contains no observations")
    return idx


@dataclass
class _RollingGarch:
    mu: np.ndarray
    sigma: np.ndarray
    fit_of: np.ndarray
    fits: List[GarchFit]
    notes: List[str]


def _rolling_garch(r, idx, window, refit_every, dist) -> _RollingGarch:
    # idx is contiguous; between refits the last parameters filter the variance forward
    n = idx.size
    mu, s2 = np.empty(n), np.empty(n)
    fit_of = np.empty(n, dtype=int)
    fits, notes = [], []
    current = None
    for j, t in enumerate(idx):
        refitted = False
        if j % refit_every == 0:
            try:
                current = garch_fit(r[t - window:t], dist=dist)
                fits.append(current)
                s2[j] = current.next_variance()
                refitted = True
            except (GarchError, np.linalg.LinAlgError, FloatingPointError) as exc:
                if current is None:
                    raise BacktestError(f"first GARCH fit failed at index {t}: {exc}") from exc
                msg = f"refit failed at index {t}, previous fit carried forward: {exc}"
                logger.warning(msg)
                notes.append(msg)
        if not refitted:
            p = current.params
            e = r[t - 1] - p.mean_mu
            s2[j] = p.omega + p.alpha_g * e * e + p.beta_g * s2[j - 1]
        fit_of[j] = len(fits) - 1
        mu[j] = current.params.mean_mu
    return _RollingGarch(mu, np.sqrt(s2), fit_of, fits, notes)


@dataclass
class _ConstantFit:
    std_residuals: np.ndarray


def _rolling_constant(r, idx, window) -> _RollingGarch:
    # ML fit of the alpha = beta = 0 model on each window
    wins = np.lib.stride_tricks.sliding_window_view(r, window)[idx - window]
    mu = wins.mean(axis=1)
    sigma = wins.std(axis=1)
    if np.any(sigma == 0):
        raise BacktestError("zero variance in an estimation window")
    fits = [_ConstantFit((w - m) / s) for w, m, s in zip(wins, mu, sigma)]
    return _RollingGarch(mu, sigma, np.arange(idx.size), fits, [])


def forecast_var(spec: VarModelSpec, data, eval_range=None, cache: Optional[dict] = None
                 ) -> VarForecastSeries:
    """
    One-step-ahead VaR forecasts over the evaluation range.

    Every forecast for date ``t`` uses returns strictly before ``t``.

    Parameters
    ----------
    spec : VarModelSpec
    data : AlignedDataset or ReturnSeries
    eval_range : (start, end), optional
        Inclusive date bounds; by default everything after the first window.
    cache : dict, optional
        Shared between calls to reuse rolling GARCH fits across families.
    """
    dates, r = _dataset(data)
    idx = eval_indices(dates, eval_range, spec.window)
    if idx[0] < spec.window:
        raise BacktestError(
            f"insufficient history: {idx[0]} observations before the evaluation range, "
            f"window needs {spec.window}")
    if np.any(np.diff(idx) != 1):
        raise BacktestError("evaluation dates must be contiguous")
    prob = 1.0 - spec.alpha
    notes: List[str] = []
    taus = None

    if spec.family == "historical_sim":
        windows = np.lib.stride_tricks.sliding_window_view(r, spec.window)
        # windows[k] covers r[k:k+window]; forecast for t uses r[t-window:t]
        var = np.quantile(windows[idx - spec.window], prob, axis=1)
    else:
        dist = _GARCH_DIST[spec.family]
        key = (dist, spec.variance, spec.window, spec.refit_every, int(idx[0]), int(idx[-1]), id(r))
        roll = cache.get(key) if cache is not None else None
        if roll is None:
            if spec.variance == "constant":
                roll = _rolling_constant(r, idx, spec.window)
            else:
                roll = _rolling_garch(r, idx, spec.window, spec.refit_every, dist)
            if cache is not None:
                cache[key] = roll
        notes.extend(roll.notes)
        if spec.family == "parametric_normal":
            scale = np.full(idx.size, stats.norm.ppf(prob))
        elif spec.family == "garch_t":
            per_fit = np.array([student_t_quantile(prob, f.params.nu) for f in roll.fits])
            scale = per_fit[roll.fit_of]
        elif spec.family == "filtered_hs":
            per_fit = np.array([np.quantile(f.std_residuals, prob) for f in roll.fits])
            scale = per_fit[roll.fit_of]
        else:
            fit_taus = np.array([calibrate_tau(f.std_residuals, spec.alpha) for f in roll.fits])
            per_fit = np.array([sample_expectile(f.std_residuals, t)
                                for f, t in zip(roll.fits, fit_taus)])
            scale = per_fit[roll.fit_of]
            taus = fit_taus[roll.fit_of]
        var = roll.mu + roll.sigma * scale

    if not np.all(np.isfinite(var)):
        raise BacktestError(f"{spec.model_id}: non-finite VaR forecast")
    return VarForecastSeries(dates[idx], np.asarray(var, dtype=float), spec.model_id,
                             spec.alpha, notes, taus)


def hit_sequence(returns, forecasts) -> np.ndarray:
    """``hit[t] = 1{r[t] < VaR[t]}`` as a boolean array."""
    r = np.asarray(returns, dtype=float).ravel()
    v = np.asarray(getattr(forecasts, "var_forecasts", forecasts), dtype=float).ravel()
    if r.size != v.size:
        raise BacktestError(f"length mismatch: {r.size} returns vs {v.size} forecasts")
    return r < v


def _bernoulli_ll(x, n, p):
    return special.xlogy(x, p) + special.xlogy(n - x, 1.0 - p)


def kupiec_uc(hits, alpha: float) -> TestResult:
    """Kupiec's likelihood-ratio test of the violation frequency against ``1 - alpha``."""
    h = np.asarray(hits, dtype=bool).ravel()
    n = h.size
    if n < 1:
        raise BacktestError("no observations")
    x = int(h.sum())
    p0 = 1.0 - alpha
    p_hat = x / n
    if abs(p_hat - p0) <= 1e-12:
        lr = 0.0
    else:
        lr = max(0.0, -2.0 * (_bernoulli_ll(x, n, p0) - _bernoulli_ll(x, n, p_hat)))
    p = float(stats.chi2.sf(lr, 1))
    return TestResult("uc", float(lr), p, 1, p < 0.05)


def _transition_counts(h):
    prev, cur = h[:-1], h[1:]
    n00 = int(np.sum(~prev & ~cur))
    n01 = int(np.sum(~prev & cur))
    n10 = int(np.sum(prev & ~cur))
    n11 = int(np.sum(prev & cur))
    return n00, n01, n10, n11


def independence_lr(hits) -> float:
    """Christoffersen's first-order Markov independence statistic."""
    h = np.asarray(hits, dtype=bool).ravel()
    n00, n01, n10, n11 = _transition_counts(h)
    n0, n1 = n00 + n01, n10 + n11
    pi01 = n01 / n0 if n0 else 0.0
    pi11 = n11 / n1 if n1 else 0.0
    pi = (n01 + n11) / (n0 + n1)
    ll_markov = _bernoulli_ll(n01, n0, pi01) + _bernoulli_ll(n11, n1, pi11)
    ll_iid = _bernoulli_ll(n01 + n11, n0 + n1, pi)
    return float(max(0.0, -2.0 * (ll_iid - ll_markov)))


def christoffersen_cc(hits, alpha: float) -> TestResult:
    """Conditional coverage: UC plus first-order independence, chi-square with 2 df."""
    h = np.asarray(hits, dtype=bool).ravel()
    if h.size < 2:
        raise BacktestError("conditional coverage needs at least 2 observations")
    uc = kupiec_uc(h, alpha)
    ind = independence_lr(h)
    lr = uc.statistic + ind
    p = float(stats.chi2.sf(lr, 2))
    return TestResult("cc", float(lr), p, 2, p < 0.05, note=f"lr_uc={uc.statistic!r};lr_ind={ind!r}")


def dq_test(hits, forecasts, alpha: float, lags: int = 4) -> TestResult:
    """
    Dynamic quantile test.

    Regresses the demeaned hits ``hit[t] - (1 - alpha)`` on a constant, their
    own ``lags`` lags and the contemporaneous VaR forecast. The statistic is
    ``Hit' X (X'X)^-1 X' Hit / (theta (1 - theta))``, chi-square with one
    degree of freedom per regressor. A constant forecast column is dropped
    and noted in the result.
    """
    h = np.asarray(hits, dtype=float).ravel()
    v = np.asarray(getattr(forecasts, "var_forecasts", forecasts), dtype=float).ravel()
    if h.size != v.size:
        raise BacktestError("hits and forecasts differ in length")
    n = h.size
    if n <= lags + 10:
        raise BacktestError("DQ test needs more than lags + 10 observations")
    theta = 1.0 - alpha
    dev = h - theta
    y = dev[lags:]
    cols = [np.ones(y.size)] + [dev[lags - i:n - i] for i in range(1, lags + 1)]
    notes = []
    var_col = v[lags:]
    with_var = np.column_stack(cols + [var_col])
    if np.ptp(var_col) == 0 or np.linalg.matrix_rank(with_var) < with_var.shape[1]:
        X = np.column_stack(cols)
        notes.append("forecast regressor dropped")
    else:
        X = with_var
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        notes.append("collinear hit lags; statistic uses a pseudo-inverse")
    xty = X.T @ y
    stat = float(xty @ np.linalg.pinv(X.T @ X) @ xty / (theta * (1.0 - theta)))
    p = float(stats.chi2.sf(stat, rank))
    return TestResult("dq", stat, p, int(rank), p < 0.05, note=";".join(notes))


def asymmetric_linear_loss(returns, forecasts, alpha: float, mean: bool = False) -> float:
    """
    Check-function loss ``sum (theta - 1{r < VaR}) (r - VaR)`` with
    ``theta = 1 - alpha`` the target violation rate.
    """
    r = np.asarray(returns, dtype=float).ravel()
    v = np.asarray(getattr(forecasts, "var_forecasts", forecasts), dtype=float).ravel()
    if r.size != v.size:
        raise BacktestError("returns and forecasts differ in length")
    theta = 1.0 - alpha
    u = r - v
    loss = (theta - (r < v)) * u
    return float(loss.mean() if mean else loss.sum())


def quadratic_loss(returns, forecasts) -> float:
    """Mean squared exceedance over violation dates; zero without violations."""
    r = np.asarray(returns, dtype=float).ravel()
    v = np.asarray(getattr(forecasts, "var_forecasts", forecasts), dtype=float).ravel()
    if r.size != v.size:
        raise BacktestError("returns and forecasts differ in length")
    hit = r < v
    if not hit.any():
        return 0.0
    return float(np.mean((r[hit] - v[hit]) ** 2))


@dataclass
class BacktestCell:
    model_id: str
    alpha: float
    n_obs: int
    n_violations: int
    violation_rate: float
    tests: Dict[str, Dict[str, float]]
    losses: Dict[str, float]
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "alpha": self.alpha,
            "n_obs": self.n_obs,
            "n_violations": self.n_violations,
            "violation_rate": self.violation_rate,
            "tests": {k: dict(v) for k, v in self.tests.items()},
            "losses": dict(self.losses),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BacktestCell":
        return cls(d["model_id"], float(d["alpha"]), int(d["n_obs"]), int(d["n_violations"]),
                   float(d["violation_rate"]),
                   {k: {"stat": float(v["stat"]), "p_value": float(v["p_value"])}
                    for k, v in d["tests"].items()},
                   {k: float(v) for k, v in d["losses"].items()},
                   list(d.get("notes", [])))


@dataclass
class BacktestReport:
    cells: List[BacktestCell]
    meta: dict = field(default_factory=dict)
    forecasts: Dict[tuple, VarForecastSeries] = field(default_factory=dict, repr=False,
                                                       compare=False)

    @property
    def failures(self) -> list:
        return self.meta.get("failures", [])

    def cell(self, model_id: str, alpha: float) -> BacktestCell:
        for c in self.cells:
            if c.model_id == model_id and c.alpha == alpha:
                return c
        raise KeyError((model_id, alpha))

    def to_dict(self) -> dict:
        return {"meta": dict(self.meta), "results": [c.to_dict() for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "BacktestReport":
        return cls([BacktestCell.from_dict(c) for c in d["results"]], dict(d.get("meta", {})))


def evaluate(returns, fc: VarForecastSeries, dq_lags: int = 4) -> BacktestCell:
    """All tests and losses for one forecast series against realised returns."""
    r = np.asarray(returns, dtype=float).ravel()
    hits = hit_sequence(r, fc)
    n = hits.size
    x = int(hits.sum())
    uc = kupiec_uc(hits, fc.alpha)
    cc = christoffersen_cc(hits, fc.alpha)
    dq = dq_test(hits, fc, fc.alpha, dq_lags)
    notes = list(fc.notes)
    if dq.note:
        notes.append(f"dq: {dq.note}")
    return BacktestCell(
        model_id=fc.model_id,
        alpha=fc.alpha,
        n_obs=n,
        n_violations=x,
        violation_rate=x / n,
        tests={"uc": uc.as_dict(), "cc": cc.as_dict(), "dq": dq.as_dict()},
        losses={"all": asymmetric_linear_loss(r, fc, fc.alpha),
                "all_mean": asymmetric_linear_loss(r, fc, fc.alpha, mean=True),
                "quadratic": quadratic_loss(r, fc)},
        notes=notes,
    )


def _run_cell(spec, data, eval_range, dq_lags, cache=None):
    dates, r = _dataset(data)
    fc = forecast_var(spec, data, eval_range, cache=cache)
    idx = eval_indices(dates, eval_range, spec.window)
    return evaluate(r[idx], fc, dq_lags), fc


def run_backtest(data, specs: Sequence[VarModelSpec], alphas: Sequence[float],
                 eval_range=None, dq_lags: int = 4, workers: int = 1,
                 meta: Optional[dict] = None) -> BacktestReport:
    """
    Forecast, test and score every model at every confidence level.

    A cell that fails (for example a GARCH fit that cannot start) is listed
    under ``meta["failures"]`` instead of aborting the run. Results do not
    depend on ``workers``.
    """
    if not specs:
        raise BacktestError("no model specifications given")
    if not alphas:
        raise BacktestError("no confidence levels given")
    jobs = [replace(s, alpha=float(a)) for s in specs for a in alphas]
    eval_indices(_dataset(data)[0], eval_range)

    results = [None] * len(jobs)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_cell, j, data, eval_range, dq_lags) for j in jobs]
            for i, f in enumerate(futs):
                try:
                    results[i] = f.result()
                except (BacktestError, GarchError, DataError, ValueError) as exc:
                    results[i] = exc
    else:
        cache: dict = {}
        for i, j in enumerate(jobs):
            try:
                results[i] = _run_cell(j, data, eval_range, dq_lags, cache)
            except (BacktestError, GarchError, DataError, ValueError) as exc:
                results[i] = exc

    cells, forecasts, failures = [], {}, []
    for job, res in zip(jobs, results):
        if isinstance(res, Exception):
            logger.error("cell %s @ %s failed: %s", job.model_id, job.alpha, res)
            failures.append({"model_id": job.model_id, "alpha": job.alpha, "error": str(res)})
            continue
        cell, fc = res
        cells.append(cell)
        forecasts[(job.model_id, job.alpha)] = fc
    out_meta = dict(meta or {})
    out_meta["dq_lags"] = dq_lags
    out_meta["failures"] = failures
    return BacktestReport(cells, out_meta, forecasts)
