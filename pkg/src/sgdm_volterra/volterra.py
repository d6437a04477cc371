"""Deterministic loss trajectory of SGD with momentum on least squares.

The expected loss ``psi(t)`` solves the discrete renewal equation

    psi(t + 1) = F(t + 1) + sum_{k <= t} K(t - k) psi(k),

where the forcing ``F`` is the loss of the batch-averaged (noise-free)
dynamics and the kernel ``K`` measures how much loss the mini-batch noise
re-injects.  Both are sums over the eigenvalues of ``A A^T`` of closed-form
geometric series built from the roots of a per-mode 3x3 transfer matrix.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .spectrum import Spectrum

# Modes whose characteristic polynomial has (nearly) a double root are
# evaluated by the transfer recurrence rather than the closed form, which
# divides by the discriminant.
DEGENERATE_TOL = 1e-4
# Discriminants this small are treated as exactly zero when computing roots.
ROOT_SNAP_TOL = 1e-10
IMAG_TOL = 1e-9


class DivergenceError(ArithmeticError):
    """Raised when a quantity is only defined for convergent parameters."""


@dataclass(frozen=True)
class Hyperparams:
    """Step size, momentum, batch fraction and signal/noise magnitudes.

    ``d_over_n`` is optional; when given it is checked against the zero
    mass of the spectrum it is used with.
    """

    gamma: float
    delta: float
    zeta: float
    R: float = 1.0
    R_tilde: float = 1.0
    d_over_n: float | None = None

    def __post_init__(self):
        for name in ("gamma", "delta", "zeta", "R", "R_tilde"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if not 0 < self.zeta <= 1:
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        if self.R < 0 or self.R_tilde < 0:
            raise ValueError("R and R_tilde must be nonnegative")
        if self.d_over_n is not None and not self.d_over_n > 0:
            raise ValueError("d_over_n must be positive")

    def replace(self, **changes) -> "Hyperparams":
        data = {k: getattr(self, k) for k in ("gamma", "delta", "zeta", "R", "R_tilde", "d_over_n")}
        data.update(changes)
        return Hyperparams(**data)

    def to_dict(self) -> dict:
        out = {"gamma": self.gamma, "delta": self.delta, "zeta": self.zeta,
               "R": self.R, "R_tilde": self.R_tilde}
        if self.d_over_n is not None:
            out["d_over_n"] = self.d_over_n
        return out


# ---------------------------------------------------------------------------
# Per-mode quantities

@dataclass(frozen=True)
class ModeCoefficients:
    """Per-eigenvalue roots and coefficients (arrays, one entry per mode).

    ``lambda2`` and ``lambda3`` are the two roots other than ``delta`` of the
    transfer matrix's characteristic polynomial, ordered so that
    ``|lambda2| >= |lambda3|``; ``kappa2`` and ``kappa3`` are the matching
    square roots signed like ``omega``.
    """

    sigma2: np.ndarray
    gamma_eff: np.ndarray
    omega: np.ndarray
    lambda1: float
    lambda2: np.ndarray
    lambda3: np.ndarray
    kappa2: np.ndarray
    kappa3: np.ndarray
    discriminant: np.ndarray


def _roots(omega, delta):
    disc = omega * omega - 4.0 * delta
    disc = np.where(np.abs(disc) < ROOT_SNAP_TOL * np.maximum(1.0, omega * omega), 0.0, disc)
    c = np.sqrt(disc + 0j)
    a = np.abs(omega)
    sgn = np.where(omega < 0, -1.0, 1.0)
    lam2 = ((a + c) / 2) ** 2
    lam3 = ((a - c) / 2) ** 2
    kap2 = sgn * (a + c) / 2
    kap3 = sgn * (a - c) / 2
    return disc, lam2, lam3, kap2, kap3


def mode_coefficients(sigma2, params: Hyperparams) -> ModeCoefficients:
    """Per-mode coefficients for one eigenvalue or an array of them."""
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=np.float64))
    if np.any(sigma2 < 0):
        raise ValueError("eigenvalues must be nonnegative")
    gam = params.gamma * params.zeta * sigma2
    omega = 1.0 - gam + params.delta
    disc, lam2, lam3, kap2, kap3 = _roots(omega, params.delta)
    return ModeCoefficients(sigma2, gam, omega, params.delta, lam2, lam3, kap2, kap3, disc)


@dataclass(frozen=True)
class ModeTransfer:
    """Transfer matrix of one mode and its initial state.

    The state ``(w_t^2, w_{t-1}^2, w_t w_{t-1})`` of a mode's residual
    evolves in expectation by ``matrix``; ``v_init`` is the state after one
    (momentum-free) step, scaled by the mode's initial energy.
    """

    matrix: np.ndarray
    v_init: np.ndarray


def transfer_matrix(omega: float, delta: float) -> np.ndarray:
    return np.array([
        [omega * omega, delta * delta, -2.0 * delta * omega],
        [1.0, 0.0, 0.0],
        [omega, 0.0, -delta],
    ])


def mode_transfer(sigma2: float, params: Hyperparams, energy: float | None = None) -> ModeTransfer:
    """Transfer matrix and initial state of a single mode.

    ``energy`` defaults to ``R sigma2 + R_tilde``, i.e. twice the expected
    initial loss carried by a mode of unit weight.
    """
    gam = params.gamma * params.zeta * sigma2
    omega = 1.0 - gam + params.delta
    if energy is None:
        energy = params.R * sigma2 + params.R_tilde
    v = energy * np.array([(1.0 - gam) ** 2, 1.0, 1.0 - gam])
    return ModeTransfer(transfer_matrix(omega, params.delta), v)


# ---------------------------------------------------------------------------
# Series over all modes

def _check_ratio(spectrum: Spectrum, params: Hyperparams) -> None:
    if params.d_over_n is None:
        return
    expected = max(1.0 - params.d_over_n, 0.0)
    if abs(expected - spectrum.zero_mass) > 1e-6:
        raise ValueError(
            f"d_over_n={params.d_over_n} implies zero mass {expected:.6g}, "
            f"but the spectrum has {spectrum.zero_mass:.6g}")


def _real(series: np.ndarray, what: str) -> np.ndarray:
    re = series.real
    scale = max(float(np.max(np.abs(re), initial=0.0)), 1e-300)
    resid = float(np.max(np.abs(series.imag), initial=0.0))
    if resid > IMAG_TOL * scale:
        raise ArithmeticError(f"{what}: imaginary residual {resid:.3g} exceeds tolerance")
    return re.copy()


def _split(coef: ModeCoefficients):
    degenerate = np.abs(coef.discriminant) < DEGENERATE_TOL * np.maximum(1.0, coef.omega ** 2)
    return degenerate, ~degenerate


def _mode_energy_series(coef: ModeCoefficients, scale: np.ndarray, horizon: int) -> np.ndarray:
    """``sum_j scale_j * g_j(t)`` for ``t = 0..horizon``.

    ``g_j(t)`` is the expected squared residual of mode ``j`` at step ``t``
    relative to its initial value (so ``g_j(0) = 1``).  Zero modes never
    move, so they contribute a constant.
    """
    delta = coef.lambda1
    zero = coef.sigma2 == 0
    degenerate, regular = _split(coef)
    regular &= ~zero
    degenerate &= ~zero
    out = np.full(horizon + 1, float(scale[zero].sum()))

    if np.any(regular):
        p = scale[regular] * 2.0 / coef.discriminant[regular]
        gam = coef.gamma_eff[regular]
        a = float(np.sum(-p * delta * gam))
        b = (p * 0.5 * (coef.kappa2[regular] - delta) ** 2).astype(np.complex128)
        c = (p * 0.5 * (coef.kappa3[regular] - delta) ** 2).astype(np.complex128)
        s = kernels.power_series(a, delta, b, coef.lambda2[regular].astype(np.complex128),
                                 c, coef.lambda3[regular].astype(np.complex128), horizon)
        out += _real(s, "forcing")

    if np.any(degenerate):
        gam = coef.gamma_eff[degenerate]
        v0 = np.stack([(1.0 - gam) ** 2, np.ones_like(gam), 1.0 - gam], axis=1)
        sc = scale[degenerate]
        out[0] += sc.sum()
        if horizon >= 1:
            out[1:] += kernels.transfer_series(coef.omega[degenerate], delta, v0, sc, horizon - 1)
    return out


def _kernel_series(coef: ModeCoefficients, scale: np.ndarray, horizon: int,
                   tail: bool = False) -> np.ndarray:
    """``sum_j scale_j * (M_j^t e_1)_1`` for ``t = 0..horizon``.

    With ``tail=True`` returns the remainder ``sum_{s > t}`` of the same
    series instead, which needs every root inside the unit disc.
    """
    delta = coef.lambda1
    keep = scale != 0
    degenerate, regular = _split(coef)
    regular &= keep
    degenerate &= keep
    out = np.zeros(horizon + 1)

    if np.any(regular):
        p = scale[regular] * 2.0 / coef.discriminant[regular]
        l2 = coef.lambda2[regular].astype(np.complex128)
        l3 = coef.lambda3[regular].astype(np.complex128)
        # The closed form has exponent t + 1; one power is folded into a, b, c.
        a = float(np.sum(-p * delta))
        b = p * 0.5 * l2
        c = p * 0.5 * l3
        if tail:
            a *= delta / (1.0 - delta)
            b = b * l2 / (1.0 - l2)
            c = c * l3 / (1.0 - l3)
        s = kernels.power_series(a, delta, b.astype(np.complex128), l2,
                                 c.astype(np.complex128), l3, horizon)
        out += _real(s, "kernel")

    if np.any(degenerate):
        om = coef.omega[degenerate]
        v0 = np.zeros((om.size, 3))
        v0[:, 0] = 1.0
        if tail:
            for i, o in enumerate(om):
                m = transfer_matrix(o, delta)
                v0[i] = m @ np.linalg.solve(np.eye(3) - m, v0[i])
        out += kernels.transfer_series(om, delta, v0, scale[degenerate], horizon)
    return out


def _default_energies(spectrum: Spectrum, params: Hyperparams) -> np.ndarray:
    return 0.5 * spectrum.weights * (params.R * spectrum.values + params.R_tilde)


def _energies(spectrum: Spectrum, params: Hyperparams, energies) -> np.ndarray:
    if energies is None:
        return _default_energies(spectrum, params)
    energies = np.asarray(energies, dtype=np.float64)
    if energies.shape != spectrum.values.shape:
        raise ValueError("energies must have one entry per spectrum value")
    if np.any(energies < 0) or not np.all(np.isfinite(energies)):
        raise ValueError("energies must be finite and nonnegative")
    return energies


def _as_times(t):
    times = np.asarray(t)
    if times.dtype.kind not in "iu" and not np.all(np.equal(np.mod(times, 1), 0)):
        raise ValueError("time indices must be integers")
    times = times.astype(np.int64)
    if np.any(times < 0):
        raise ValueError("time indices must be nonnegative")
    return times


def _evaluate(series_fn, t):
    times = _as_times(t)
    horizon = int(times.max(initial=0))
    series = series_fn(horizon)
    out = series[times]
    return float(out) if out.ndim == 0 else out


def forcing_h_series(spectrum: Spectrum, params: Hyperparams, horizon: int, k: int) -> np.ndarray:
    """``h_k(t)`` for ``t = 0..horizon``: the ``sigma^{2k}``-weighted mode decay."""
    if k not in (0, 1):
        raise ValueError("k must be 0 or 1")
    coef = mode_coefficients(spectrum.values, params)
    scale = spectrum.weights * spectrum.values ** k
    return _mode_energy_series(coef, scale, horizon)


def forcing_h(spectrum: Spectrum, params: Hyperparams, t, k: int):
    """``h_k`` at a time index or array of time indices."""
    return _evaluate(lambda T: forcing_h_series(spectrum, params, T, k), t)


def forcing_series(spectrum: Spectrum, params: Hyperparams, horizon: int,
                   energies=None) -> np.ndarray:
    """Forcing ``F(t)`` for ``t = 0..horizon``.

    By default ``F = (R/2) h_1 + (R_tilde/2) h_0``.  ``energies`` replaces the
    expected per-mode initial loss ``w_j (R sigma_j^2 + R_tilde) / 2`` by
    caller-supplied values, e.g. the realized initial residual of a
    specific problem instance projected onto its singular vectors.
    """
    coef = mode_coefficients(spectrum.values, params)
    out = _mode_energy_series(coef, _energies(spectrum, params, energies), horizon)
    return np.maximum(out, 0.0)


def forcing(spectrum: Spectrum, params: Hyperparams, t, energies=None):
    return _evaluate(lambda T: forcing_series(spectrum, params, T, energies), t)


def kernel_series(spectrum: Spectrum, params: Hyperparams, horizon: int,
                  tail: bool = False) -> np.ndarray:
    """Kernel ``K(t) = gamma^2 zeta (1 - zeta) H_2(t)`` for ``t = 0..horizon``.

    ``tail=True`` gives ``sum_{s > t} K(s)`` instead (convergent parameters
    only).
    """
    pre = params.gamma ** 2 * params.zeta * (1.0 - params.zeta)
    if pre == 0.0:
        return np.zeros(horizon + 1)
    coef = mode_coefficients(spectrum.values, params)
    scale = pre * spectrum.weights * spectrum.values ** 2
    return _kernel_series(coef, scale, horizon, tail)


def kernel(spectrum: Spectrum, params: Hyperparams, t):
    return _evaluate(lambda T: kernel_series(spectrum, params, T), t)


def learning_rate_bound(spectrum: Spectrum, params: Hyperparams) -> float:
    """Largest step size keeping every ``omega_j`` positive."""
    if spectrum.sigma2_max <= 0:
        return np.inf
    return (1.0 + params.delta) / (params.zeta * spectrum.sigma2_max)


def kernel_norm(spectrum: Spectrum, params: Hyperparams) -> float:
    """Closed-form ``sum_t K(t)``.

    Requires ``gamma < (1 + delta) / (zeta sigma2_max)``.
    """
    bound = learning_rate_bound(spectrum, params)
    if not params.gamma < bound:
        raise ValueError(
            f"kernel norm closed form needs gamma < (1+delta)/(zeta*sigma2_max) = {bound:.6g}, "
            f"got gamma={params.gamma}")
    s = spectrum.values
    omega = 1.0 - params.gamma * params.zeta * s + params.delta
    terms = ((1.0 - params.zeta) * params.gamma * s * (1.0 + params.delta)
             / ((1.0 - params.delta) * (1.0 + params.delta + omega)))
    return float(spectrum.weights @ terms)


def kernel_transform(spectrum: Spectrum, params: Hyperparams, xi: float) -> float:
    """Generating function ``sum_t xi^t K(t)``, valid for ``xi < 1 / lambda2_max``."""
    cw, om2 = _transform_inputs(spectrum, params)
    return float(kernels.kernel_transform(float(xi), cw, om2, float(params.delta)))


def _transform_inputs(spectrum: Spectrum, params: Hyperparams):
    s = spectrum.values
    cw = params.zeta * (1.0 - params.zeta) * params.gamma ** 2 * spectrum.weights * s * s
    omega = 1.0 - params.gamma * params.zeta * s + params.delta
    keep = cw > 0
    return np.ascontiguousarray(cw[keep]), np.ascontiguousarray(omega[keep] ** 2)


def lambda2_max(spectrum: Spectrum, params: Hyperparams) -> float:
    """Largest ``|lambda2|`` over the nonzero modes.

    ``|lambda2|`` depends on sigma^2 only through ``|omega|``, which is
    extremal at one of the support edges, so only the edges are examined.
    """
    edges = np.array([spectrum.sigma2_min, spectrum.sigma2_max])
    edges = edges[edges > 0]
    if edges.size == 0:
        return 0.0
    coef = mode_coefficients(edges, params)
    return float(np.max(np.abs(coef.lambda2)))


# ---------------------------------------------------------------------------
# Volterra solution

@dataclass(frozen=True)
class VolterraSolution:
    """Forcing, kernel and loss on ``t = 0..horizon``.

    ``psi_infinity`` is ``None`` when the solution diverges.  ``excess``
    holds ``psi(t) - psi_infinity`` computed from its own recursion, so it
    keeps full relative accuracy after ``psi`` has converged to working
    precision; it is ``None`` when the solution diverges.
    """

    forcing: np.ndarray
    kernel: np.ndarray
    psi: np.ndarray
    psi_infinity: float | None
    kernel_norm: float
    divergent: bool
    lambda2_max: float
    excess: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return int(self.psi.shape[0] - 1)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.horizon + 1)

    def sidecar(self) -> dict:
        norm = self.kernel_norm if np.isfinite(self.kernel_norm) else None
        return {"psi_infinity": self.psi_infinity, "kernel_norm": norm,
                "divergent": bool(self.divergent), "lambda2_max": self.lambda2_max,
                "horizon": self.horizon, **self.meta}

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        csv_path = Path(csv_path)
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "forcing", "kernel", "psi"])
            for t in range(self.horizon + 1):
                w.writerow([t, fmt(self.forcing[t]), fmt(self.kernel[t]), fmt(self.psi[t])])
        if json_path is None:
            json_path = csv_path.with_suffix(".meta.json")
        Path(json_path).write_text(json.dumps(self.sidecar(), indent=1, allow_nan=False) + "\n")


def fmt(x: float) -> str:
    """Lossless decimal text for a float."""
    return format(float(x), ".17g")


def solve_volterra(spectrum: Spectrum, params: Hyperparams, horizon: int,
                   psi0: float | None = None, energies=None) -> VolterraSolution:
    """Solve the renewal recursion for ``psi`` on ``t = 0..horizon``.

    Parameters
    ----------
    psi0
        Initial loss; defaults to ``F(0)``.
    energies
        Optional per-mode initial energies, see :func:`forcing_series`.

    Notes
    -----
    The solution is always computed.  ``divergent`` is set when
    ``lambda2_max >= 1`` or the kernel norm is at least 1, in which case
    ``psi_infinity`` is ``None``.
    """
    if int(horizon) != horizon or horizon < 0:
        raise ValueError("horizon must be a nonnegative integer")
    horizon = int(horizon)
    _check_ratio(spectrum, params)
    en = _energies(spectrum, params, energies)
    zero = spectrum.values == 0
    f_inf = float(en[zero].sum())
    coef = mode_coefficients(spectrum.values, params)
    f_moving = _mode_energy_series(coef, np.where(zero, 0.0, en), horizon)
    f = np.maximum(f_moving + f_inf, 0.0)
    k = kernel_series(spectrum, params, horizon)
    if psi0 is None:
        psi0 = float(f[0])
    if not psi0 >= 0:
        raise ValueError("psi0 must be nonnegative")
    psi = kernels.volterra(np.ascontiguousarray(f), np.ascontiguousarray(k), float(psi0))

    lam = lambda2_max(spectrum, params)
    norm = kernel_transform(spectrum, params, 1.0) if lam < 1 else np.inf
    divergent = not (lam < 1 and norm < 1)
    psi_inf = excess = None
    if not divergent:
        psi_inf = f_inf / (1.0 - norm)
        # psi - psi_inf obeys the same recursion with forcing
        # (F - F_inf)(t + 1) - psi_inf * sum_{s > t} K(s).
        drive = np.zeros(horizon + 1)
        if horizon >= 1:
            drive[1:] = f_moving[1:] - psi_inf * kernel_series(spectrum, params, horizon - 1, tail=True)
        excess = kernels.volterra(drive, np.ascontiguousarray(k), float(psi0) - psi_inf)
    return VolterraSolution(f, k, psi, psi_inf, float(norm), divergent, lam, excess)


# ---------------------------------------------------------------------------
# Reference implementation by explicit 3x3 matrix products

def forcing_oracle(spectrum: Spectrum, params: Hyperparams, t: int, energies=None) -> float:
    """Forcing at step ``t >= 1`` from repeated 3x3 matrix-vector products.

    Independent of the closed-form root expansion; used to cross-check it.
    """
    if spectrum.kind != "explicit":
        raise ValueError("the matrix-power reference needs an explicit spectrum")
    if int(t) != t or t < 1:
        raise ValueError("t must be an integer >= 1")
    en = _energies(spectrum, params, energies)
    total = 0.0
    for s, e in zip(spectrum.values, en):
        mt = mode_transfer(float(s), params, energy=2.0 * e)
        v = mt.v_init
        for _ in range(int(t) - 1):
            v = mt.matrix @ v
        total += 0.5 * v[0]
    return float(total)
