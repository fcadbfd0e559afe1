"""Time-varying expectile level and adaptive threshold recursions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

_TINY = np.finfo(float).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)

CLAMP_LO, CLAMP_HI = 1e-6, 1.0 - 1e-6


@dataclass(frozen=True)
class DynamicTauParams:
    delta0: float = 0.0
    delta1: float = 0.0
    delta2: float = 0.0
    delta3: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.delta0, self.delta1, self.delta2, self.delta3])):
            raise ValueError("recursion coefficients must be finite")


def _paths(a, b, names):
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError(f"{names[0]} and {names[1]} differ in length ({x.size} vs {y.size})")
    return x, y


def dynamic_tau_path(params: DynamicTauParams, tau0: float, sigma2_path, abs_return_path) -> np.ndarray:
    """
    ``tau[t] = Phi(d0 + d1*tau[t-1] + d2*sigma2[t-1] + d3*|r[t-1]|)``.

    Element ``t`` of the output is the level following input date ``t``, so
    the output has the length of the inputs and starts from ``tau0``.
    Values are kept strictly inside (0, 1) even where ``Phi`` rounds to 0 or 1.
    """
    if not 0.0 < tau0 < 1.0:
        raise ValueError("tau0 must lie in (0, 1)")
    s2, ar = _paths(sigma2_path, abs_return_path, ("sigma2_path", "abs_return_path"))
    ar = np.abs(ar)
    out = np.empty(s2.size)
    prev = float(tau0)
    d0, d1, d2, d3 = params.delta0, params.delta1, params.delta2, params.delta3
    for t in range(s2.size):
        prev = min(max(float(ndtr(d0 + d1 * prev + d2 * s2[t] + d3 * ar[t])), _TINY), _BELOW_ONE)
        out[t] = prev
    return out


@dataclass
class AdaptiveThresholdPath:
    gammas: np.ndarray
    clamped: np.ndarray

    @property
    def clamp_count(self) -> int:
        return int(self.clamped.sum())


def adaptive_threshold_path(params: DynamicTauParams, gamma0: float, vix_path,
                            abs_return_path) -> AdaptiveThresholdPath:
    """
    ``gamma[t] = Phi^-1(d0 + d1*gamma[t-1] + d2*VIX[t-1] + d3*|r[t-1]|)``.

    The inner argument is not confined to (0, 1), so it is clamped to
    ``[1e-6, 1 - 1e-6]`` before the inverse normal; clamped steps are flagged.
    Output indexing matches :func:`dynamic_tau_path`.
    """
    vix, ar = _paths(vix_path, abs_return_path, ("vix_path", "abs_return_path"))
    if not (np.all(np.isfinite(vix)) and np.all(np.isfinite(ar)) and np.isfinite(gamma0)):
        raise ValueError("threshold recursion inputs must be finite")
    ar = np.abs(ar)
    out = np.empty(vix.size)
    clamped = np.zeros(vix.size, dtype=bool)
    prev = float(gamma0)
    d0, d1, d2, d3 = params.delta0, params.delta1, params.delta2, params.delta3
    for t in range(vix.size):
        arg = d0 + d1 * prev + d2 * vix[t] + d3 * ar[t]
        if not CLAMP_LO <= arg <= CLAMP_HI:
            clamped[t] = True
            arg = min(max(arg, CLAMP_LO), CLAMP_HI)
        prev = float(ndtri(arg))
        out[t] = prev
    return AdaptiveThresholdPath(out, clamped)
