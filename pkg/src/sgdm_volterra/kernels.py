"""Hot numeric kernels.

Every kernel exists twice: a pure-numpy implementation (``*_np``) and a
numba-compiled loop implementation (``*_nb``).  The public names bound at
module level point at one or the other depending on the environment
variable ``SGDM_VOLTERRA_NUMBA`` (``0``/``false``/``off`` selects numpy).
Both variants consume randomness identically and agree to rounding error,
so results never depend on which path is active beyond the last few ulps.
"""
from __future__ import annotations

import os

import numpy as np

ENV_FLAG = "SGDM_VOLTERRA_NUMBA"

try:  # pragma: no cover - exercised implicitly by the import
    import numba
except ImportError:  # pragma: no cover
    numba = None


def numba_requested() -> bool:
    value = os.environ.get(ENV_FLAG, "1").strip().lower()
    return value not in ("0", "false", "no", "off")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and numba_requested()


def _jit(func):
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# Per-mode geometric series:  S(t) = a * delta**t + sum_j b_j l2_j**t + c_j l3_j**t

def power_series_np(a, delta, b, l2, c, l3, horizon):
    t = np.arange(horizon + 1, dtype=np.float64)
    out = a * np.power(delta, t) + 0j
    chunk = 256
    for start in range(0, b.shape[0], chunk):
        sl = slice(start, start + chunk)
        out += np.power(l2[sl][None, :], t[:, None]) @ b[sl]
        out += np.power(l3[sl][None, :], t[:, None]) @ c[sl]
    return out


def _power_series_loop(a, delta, b, l2, c, l3, horizon):
    out = np.zeros(horizon + 1, dtype=np.complex128)
    p = 1.0
    for t in range(horizon + 1):
        out[t] = a * p
        p *= delta
    for j in range(b.shape[0]):
        p2 = 1.0 + 0j
        p3 = 1.0 + 0j
        bj = b[j]
        cj = c[j]
        for t in range(horizon + 1):
            out[t] += bj * p2 + cj * p3
            p2 *= l2[j]
            p3 *= l3[j]
    return out


power_series_nb = _jit(_power_series_loop)


# ---------------------------------------------------------------------------
# Direct 3x3 transfer recurrence, used for modes whose closed form is
# ill-conditioned (double root of the characteristic polynomial).
#   state' = (Om^2 s0 + D^2 s1 - 2 D Om s2,  s0,  Om s0 - D s2)
# out[t] = sum_j coef_j * (M_j^t v_j)_0

def transfer_series_np(omega, delta, v0, coef, horizon):
    s0 = v0[:, 0].copy()
    s1 = v0[:, 1].copy()
    s2 = v0[:, 2].copy()
    out = np.empty(horizon + 1)
    om2 = omega * omega
    for t in range(horizon + 1):
        out[t] = coef @ s0
        n0 = om2 * s0 + delta * delta * s1 - 2.0 * delta * omega * s2
        n2 = omega * s0 - delta * s2
        s1 = s0
        s0 = n0
        s2 = n2
    return out


def _transfer_series_loop(omega, delta, v0, coef, horizon):
    out = np.zeros(horizon + 1)
    for j in range(omega.shape[0]):
        om = omega[j]
        s0 = v0[j, 0]
        s1 = v0[j, 1]
        s2 = v0[j, 2]
        cj = coef[j]
        for t in range(horizon + 1):
            out[t] += cj * s0
            n0 = om * om * s0 + delta * delta * s1 - 2.0 * delta * om * s2
            n2 = om * s0 - delta * s2
            s1 = s0
            s0 = n0
            s2 = n2
    return out


transfer_series_nb = _jit(_transfer_series_loop)


# ---------------------------------------------------------------------------
# Discrete Volterra recursion  psi(t+1) = F(t+1) + sum_{k<=t} K(t-k) psi(k)

def volterra_np(forcing, kernel, psi0):
    horizon = forcing.shape[0] - 1
    psi = np.empty(horizon + 1)
    psi[0] = psi0
    rev = kernel[::-1]
    for t in range(horizon):
        # rev[horizon - t:] is kernel[t], ..., kernel[0]
        psi[t + 1] = forcing[t + 1] + rev[horizon - t:] @ psi[: t + 1]
    return psi


def _volterra_loop(forcing, kernel, psi0):
    horizon = forcing.shape[0] - 1
    psi = np.empty(horizon + 1)
    psi[0] = psi0
    for t in range(horizon):
        acc = 0.0
        for k in range(t + 1):
            acc += kernel[t - k] * psi[k]
        psi[t + 1] = forcing[t + 1] + acc
    return psi


volterra_nb = _jit(_volterra_loop)


# ---------------------------------------------------------------------------
# Kernel generating function and Malthusian bisection.
#   Ktilde(xi) = sum_j cw_j (1 + xi D) / ((1 - xi D)(1 - xi (Om_j^2 - 2D) + xi^2 D^2))

def kernel_transform_np(xi, cw, om2, delta):
    xd = xi * delta
    den = (1.0 - xd) * (1.0 - xi * (om2 - 2.0 * delta) + xd * xd)
    return float(np.sum(cw * (1.0 + xd) / den))


def _kernel_transform_loop(xi, cw, om2, delta):
    xd = xi * delta
    pre = (1.0 + xd) / (1.0 - xd)
    acc = 0.0
    for j in range(cw.shape[0]):
        acc += cw[j] / (1.0 - xi * (om2[j] - 2.0 * delta) + xd * xd)
    return acc * pre


kernel_transform_nb = _jit(_kernel_transform_loop)


# xi * Ktilde(xi): its root locates the pole of the solution's generating
# function when the recursion is indexed psi(t + 1) = F(t + 1) + (K * psi)(t).

def shifted_transform_np(xi, cw, om2, delta):
    return xi * kernel_transform_np(xi, cw, om2, delta)


def _shifted_transform_loop(xi, cw, om2, delta):
    return xi * kernel_transform_nb(xi, cw, om2, delta)


shifted_transform_nb = _jit(_shifted_transform_loop) if numba is not None else shifted_transform_np


def _make_bisect(transform):
    def bisect(lo, hi, cw, om2, delta, max_iter, tol):
        """Root of transform(xi) = 1 on [lo, hi]; returns (root, residual, monotone)."""
        monotone = True
        prev = transform(lo, cw, om2, delta)
        for i in range(1, 9):
            x = lo + (hi - lo) * i / 8.0
            cur = transform(x, cw, om2, delta)
            if cur < prev - 1e-12 * abs(prev):
                monotone = False
            prev = cur
        a = lo
        b = hi
        best = 0.5 * (a + b)
        best_res = transform(best, cw, om2, delta) - 1.0
        for _ in range(max_iter):
            mid = 0.5 * (a + b)
            if mid <= a or mid >= b:
                break
            res = transform(mid, cw, om2, delta) - 1.0
            if abs(res) < abs(best_res):
                best = mid
                best_res = res
            if abs(res) < tol:
                break
            if res < 0.0:
                a = mid
            else:
                b = mid
        return best, best_res, monotone

    return bisect


bisect_np = _make_bisect(kernel_transform_np)
bisect_nb = _jit(_make_bisect(kernel_transform_nb)) if numba is not None else bisect_np
bisect_shifted_np = _make_bisect(shifted_transform_np)
bisect_shifted_nb = (_jit(_make_bisect(shifted_transform_nb)) if numba is not None
                     else bisect_shifted_np)


# ---------------------------------------------------------------------------
# Partial Fisher-Yates: pool[i] <-> pool[draws[i]] for i < len(draws),
# with draws[i] uniform on [i, n).  The first len(draws) entries form the batch.

def fisher_yates_np(pool, draws):
    for i in range(draws.shape[0]):
        j = int(draws[i])
        pool[i], pool[j] = pool[j], pool[i]
    return pool[: draws.shape[0]].copy()


def _fisher_yates_loop(pool, draws):
    for i in range(draws.shape[0]):
        j = draws[i]
        tmp = pool[i]
        pool[i] = pool[j]
        pool[j] = tmp
    return pool[: draws.shape[0]].copy()


fisher_yates_nb = _jit(_fisher_yates_loop)


if USE_NUMBA:
    power_series = power_series_nb
    transfer_series = transfer_series_nb
    volterra = volterra_nb
    kernel_transform = kernel_transform_nb
    bisect = bisect_nb
    bisect_shifted = bisect_shifted_nb
    fisher_yates = fisher_yates_nb
else:
    power_series = power_series_np
    transfer_series = transfer_series_np
    volterra = volterra_np
    kernel_transform = kernel_transform_np
    bisect = bisect_np
    bisect_shifted = bisect_shifted_np
    fisher_yates = fisher_yates_np

BACKEND = "numba" if USE_NUMBA else "numpy"
