"""Asymptotic convergence rates, regime classification and parameter advice.

Two noise-driven rates are reported.  ``xi`` (the Malthusian exponent)
solves ``sum_t xi^t K(t) = 1`` and gives the headline rate
``max(lambda2_max, 1 / xi)``.  Because the recursion feeds ``psi(k)`` into
``psi(t + 1)`` with weight ``K(t - k)``, the pole of the solution's
generating function sits instead at the root ``z`` of
``z * sum_t z^t K(t) = 1``; ``tail_rate = max(lambda2_max, 1 / z)`` is the
rate actually observed in the tail of ``psi``.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .spectrum import Spectrum, condition_report
from .volterra import (DivergenceError, Hyperparams, VolterraSolution, _transform_inputs, fmt,
                       kernel_transform, lambda2_max, learning_rate_bound)

PROBLEM = "ProblemConstrained"
ALGORITHMIC = "AlgorithmicallyConstrained"
DIVERGENT = "Divergent"

BISECT_ITERS = 200
BISECT_TOL = 1e-12
BRACKET_EPS = 1e-12
LOWER_BOUND_CONST = 8.0
UNDERFLOW = 1e-280
THREADS_ENV = "SGDM_VOLTERRA_THREADS"

__all__ = [
    "lambda2_max", "kernel_transform", "malthusian_exponent", "renewal_root", "RateReport", "rate_report",
    "ParameterAdvice", "advise", "polyak_parameters", "good_momentum", "lower_bound_check", "heatmap", "Heatmap", "measured_rate",
    "InapplicableError", "InsufficientDataError", "DivergenceError",
]


class InapplicableError(ValueError):
    """The inputs fall outside the set on which a check is meaningful."""


class InsufficientDataError(ValueError):
    """Too few usable points to fit a rate."""


def _solve_transform(spectrum: Spectrum, params: Hyperparams, lo: float, hi: float,
                     shifted: bool = False):
    cw, om2 = _transform_inputs(spectrum, params)
    search = kernels.bisect_shifted if shifted else kernels.bisect
    root, resid, monotone = search(float(lo), float(hi), cw, om2, float(params.delta),
                                   BISECT_ITERS, BISECT_TOL)
    if not monotone:
        raise ArithmeticError("kernel transform is not monotone on the search bracket")
    return float(root), float(resid)


def _malthusian(spectrum: Spectrum, params: Hyperparams, lam: float):
    if lam >= 1:
        raise DivergenceError(f"lambda2_max = {lam:.6g} >= 1")
    k1 = kernel_transform(spectrum, params, 1.0)
    if k1 >= 1:
        raise DivergenceError(f"kernel norm = {k1:.6g} >= 1")
    hi = (1.0 / lam) * (1.0 - BRACKET_EPS) if lam > 0 else 1e12
    if kernel_transform(spectrum, params, hi) < 1.0:
        return None, None
    return _solve_transform(spectrum, params, 1.0, hi)


def renewal_root(spectrum: Spectrum, params: Hyperparams) -> float | None:
    """Root ``z`` of ``z * sum_t z^t K(t) = 1``; ``None`` if above ``1 / lambda2_max``.

    For convergent parameters ``z > 1``; otherwise ``z <= 1`` and ``1 / z``
    is the growth rate of the solution.
    """
    lam = lambda2_max(spectrum, params)
    if lam >= 1:
        raise DivergenceError(f"lambda2_max = {lam:.6g} >= 1")
    hi = (1.0 / lam) * (1.0 - BRACKET_EPS) if lam > 0 else 1e12
    if hi * kernel_transform(spectrum, params, hi) < 1.0:
        return None
    lo = 1.0 if kernel_transform(spectrum, params, 1.0) < 1.0 else 0.0
    return _solve_transform(spectrum, params, lo, hi, shifted=True)[0]


def malthusian_exponent(spectrum: Spectrum, params: Hyperparams) -> float | None:
    """Root ``xi`` of ``sum_t xi^t K(t) = 1`` in ``(1, 1 / lambda2_max)``.

    Returns ``None`` when the transform stays below 1 on the whole bracket.

    Raises
    ------
    DivergenceError
        If ``lambda2_max >= 1`` or the kernel norm is at least 1.
    """
    xi, _ = _malthusian(spectrum, params, lambda2_max(spectrum, params))
    return xi


@dataclass(frozen=True)
class RateReport:
    lambda2_max: float
    malthusian: float | None
    rate: float
    regime: str
    epsilon: float
    kernel_norm: float
    tail_rate: float
    residual: float | None = None

    @property
    def xi_inverse(self) -> float | None:
        return None if self.malthusian is None else 1.0 / self.malthusian

    @property
    def divergent(self) -> bool:
        return self.regime == DIVERGENT

    def to_dict(self) -> dict:
        def clean(x):
            return None if x is None or not np.isfinite(x) else float(x)
        return {"lambda2_max": clean(self.lambda2_max), "malthusian": clean(self.malthusian),
                "xi_inverse": clean(self.xi_inverse), "rate": clean(self.rate),
                "regime": self.regime, "epsilon": self.epsilon,
                "kernel_norm": clean(self.kernel_norm), "tail_rate": clean(self.tail_rate)}


def rate_report(spectrum: Spectrum, params: Hyperparams, epsilon: float = 0.5) -> RateReport:
    """Asymptotic rate and regime of ``(gamma, delta, zeta)`` on ``spectrum``.

    A run is ``Divergent`` when ``lambda2_max >= 1`` or the kernel norm is at
    least 1; its ``rate`` is then the growth rate of the solution
    (infinite if ``lambda2_max >= 1``).  Otherwise the run is problem
    constrained when no Malthusian exponent exists or when
    ``1 - sqrt(xi) < (1 - sqrt(1 / lambda2_max)) (1 - epsilon)``.
    """
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    lam = lambda2_max(spectrum, params)
    if lam >= 1:
        return RateReport(lam, None, lam, DIVERGENT, epsilon, np.inf, lam)
    k1 = kernel_transform(spectrum, params, 1.0)
    z = renewal_root(spectrum, params)
    tail = lam if z is None else max(lam, 1.0 / z)
    if k1 >= 1:
        return RateReport(lam, None, tail, DIVERGENT, epsilon, k1, tail)
    xi, resid = _malthusian(spectrum, params, lam)
    if xi is None:
        return RateReport(lam, None, lam, PROBLEM, epsilon, k1, tail)
    rate = max(lam, 1.0 / xi)
    bound = (1.0 - np.sqrt(1.0 / lam)) * (1.0 - epsilon) if lam > 0 else -np.inf
    regime = PROBLEM if 1.0 - np.sqrt(xi) < bound else ALGORITHMIC
    return RateReport(lam, xi, rate, regime, epsilon, k1, tail, resid)


# ---------------------------------------------------------------------------
# Parameter advice

@dataclass(frozen=True)
class ParameterAdvice:
    zeta: float
    gamma_polyak: float
    delta_polyak: float
    regime_prediction: str
    gamma_good: float | None = None
    delta_good: float | None = None
    C_const: float | None = None

    @property
    def predicted_rate(self) -> float | None:
        return self.delta_good

    def to_dict(self) -> dict:
        return {"zeta": self.zeta, "gamma_good": self.gamma_good, "delta_good": self.delta_good,
                "gamma_polyak": self.gamma_polyak, "delta_polyak": self.delta_polyak,
                "C_const": self.C_const, "regime_prediction": self.regime_prediction,
                "predicted_rate": self.predicted_rate}


def polyak_parameters(spectrum: Spectrum, zeta: float) -> tuple[float, float]:
    """Heavy-ball step size and momentum, with the step size scaled by ``1 / zeta``."""
    hi, lo = np.sqrt(spectrum.sigma2_max), np.sqrt(spectrum.sigma2_min)
    gamma = (2.0 / (hi + lo)) ** 2 / zeta
    delta = ((hi - lo) / (hi + lo)) ** 2
    return float(gamma), float(delta)


def good_momentum(kappa: float, kappa_bar: float, zeta: float) -> float:
    c = zeta / (8.0 * (1.0 - zeta))
    small = (1.0 - c / kappa_bar) / (1.0 + c / kappa_bar)
    s = 1.0 / np.sqrt(2.0 * kappa)
    large = (1.0 - s) / (1.0 + s)
    return float(max(small, large) ** 2)


def advise(spectrum: Spectrum, zeta: float) -> ParameterAdvice:
    """Recommended step size and momentum for batch fraction ``zeta``.

    At ``zeta == 1`` only the heavy-ball pair is returned.
    """
    if not 0 < zeta <= 1:
        raise ValueError(f"zeta must lie in (0, 1], got {zeta}")
    cond = condition_report(spectrum)
    gp, dp = polyak_parameters(spectrum, zeta)
    regime = "LargeBatch" if zeta >= cond.icr else "SmallBatch"
    if zeta == 1:
        return ParameterAdvice(zeta, gp, dp, regime)
    delta = good_momentum(cond.kappa, cond.kappa_bar, zeta)
    gamma = (1.0 - np.sqrt(delta)) ** 2 / (zeta * spectrum.sigma2_min)
    return ParameterAdvice(zeta, gp, dp, regime, float(gamma), delta,
                           zeta / (8.0 * (1.0 - zeta)))


def lower_bound_check(spectrum: Spectrum, params: Hyperparams,
                      const: float = LOWER_BOUND_CONST) -> bool:
    """Whether ``sqrt(lambda2_max) >= 1 - const * zeta / kappa_bar``.

    Raises
    ------
    InapplicableError
        If ``zeta > min(1/2, ICR)`` or the step size violates either the
        learning-rate bound or the trace condition.
    """
    cond = condition_report(spectrum)
    if params.zeta > min(0.5, cond.icr):
        raise InapplicableError(f"zeta={params.zeta} exceeds min(1/2, ICR={cond.icr:.6g})")
    if not params.gamma < learning_rate_bound(spectrum, params):
        raise InapplicableError("step size violates gamma < (1+delta)/(zeta*sigma2_max)")
    trace = (1.0 - params.zeta) * params.gamma * spectrum.mean / (1.0 - params.delta)
    if not trace < 1:
        raise InapplicableError(f"trace condition fails ({trace:.6g} >= 1)")
    lam = lambda2_max(spectrum, params)
    return bool(np.sqrt(lam) >= 1.0 - const * params.zeta / cond.kappa_bar)


# ---------------------------------------------------------------------------
# Sweeps

@dataclass(frozen=True)
class Heatmap:
    deltas: np.ndarray
    gammas: np.ndarray
    reports: list  # row-major: reports[i][j] for deltas[i], gammas[j]

    def field(self, name: str) -> np.ndarray:
        out = np.empty((len(self.deltas), len(self.gammas)), dtype=object if name == "regime" else float)
        for i, row in enumerate(self.reports):
            for j, rep in enumerate(row):
                val = getattr(rep, name)
                out[i, j] = np.nan if val is None else val
        return out

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "gamma", "lambda2_max", "xi_inverse", "rate", "regime",
                        "tail_rate"])
            for d, row in zip(self.deltas, self.reports):
                for g, rep in zip(self.gammas, row):
                    xi_inv = "" if rep.xi_inverse is None else fmt(rep.xi_inverse)
                    w.writerow([fmt(d), fmt(g), fmt(rep.lambda2_max), xi_inv, fmt(rep.rate),
                                rep.regime, fmt(rep.tail_rate)])


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def heatmap(spectrum: Spectrum, zeta: float, delta_grid, gamma_grid, epsilon: float = 0.5,
            R: float = 1.0, R_tilde: float = 1.0, threads: int | None = None) -> Heatmap:
    """Rate report for every ``(delta, gamma)`` cell; rows follow ``delta_grid``."""
    deltas = np.asarray(delta_grid, dtype=np.float64).ravel()
    gammas = np.asarray(gamma_grid, dtype=np.float64).ravel()
    if deltas.size == 0 or gammas.size == 0:
        raise ValueError("grids must be non-empty")
    if np.any((deltas < 0) | (deltas >= 1)):
        raise ValueError("delta values must lie in [0, 1)")

    def row(delta):
        return [rate_report(spectrum, Hyperparams(float(g), float(delta), zeta, R, R_tilde), epsilon)
                for g in gammas]

    threads = default_threads() if threads is None else threads
    if threads <= 1:
        rows = [row(d) for d in deltas]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, deltas))
    return Heatmap(deltas, gammas, rows)


def measured_rate(solution: VolterraSolution | np.ndarray, tail_fraction: float = 0.5,
                  psi_infinity: float | None = None, min_points: int = 10,
                  floor: float = 1e-14) -> float:
    """Geometric rate of ``psi(t) - psi_infinity`` from a log-linear tail fit.

    The fit uses the last ``tail_fraction`` of the usable range.  For a raw
    array, points at or below ``floor`` (relative to the initial loss) are
    unusable, since ``psi - psi_infinity`` has no more accuracy than that.
    A :class:`VolterraSolution` carries a separately computed excess with
    full relative accuracy, so only values near underflow are discarded.

    Raises
    ------
    InsufficientDataError
        If fewer than ``min_points`` usable points remain.
    """
    if isinstance(solution, VolterraSolution):
        if solution.divergent:
            raise DivergenceError("cannot fit a rate to a divergent solution")
        diff = solution.excess
        scale = max(abs(float(diff[0])), 1e-300)
        floor = UNDERFLOW
    else:
        psi = np.asarray(solution, dtype=np.float64)
        psi_infinity = 0.0 if psi_infinity is None else psi_infinity
        diff = psi - psi_infinity
        scale = max(abs(float(psi[0])), abs(psi_infinity), 1e-300)
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    usable = diff > floor * scale
    idx = np.flatnonzero(usable)
    if idx.size == 0:
        raise InsufficientDataError("no usable points above the floor")
    end = int(idx[-1]) + 1
    start = end - int(np.ceil(tail_fraction * end))
    t = np.arange(start, end)
    t = t[usable[start:end]]
    if t.size < min_points:
        raise InsufficientDataError(f"only {t.size} usable points in the tail window")
    slope = np.polyfit(t.astype(np.float64), np.log(diff[t]), 1)[0]
    return float(np.exp(slope))
