"""Per-point RK4 characteristic marching with bisection exit localisation.

Compiled counterpart of the vectorised path in ``FlowMap.characteristics``
for the built-in affine and polynomial fields (positions only, no Jacobian).
Field codes: 0 affine ``offset + B x``, 1 one-dimensional polynomial.
"""
import math

import numpy as np

from .._accel import njit

FIELD_AFFINE, FIELD_POLY = 0, 1


@njit
def _velocity(code, params, amp, freq, tau, x, out):
    f = 1.0
    if amp != 0.0 and freq != 0.0:
        f = 1.0 + amp * math.sin(freq * tau)
    d = x.shape[0]
    if code == 0:
        for i in range(d):
            v = params[i]
            for j in range(d):
                v += params[d + i * d + j] * x[j]
            out[i] = f * v
    else:
        v = 0.0
        for k in range(params.shape[0] - 1, -1, -1):
            v = v * x[0] + params[k]
        out[0] = f * v


@njit
def _rk4_point(code, params, amp, freq, tau, h, x, out, k1, k2, k3, k4, tmp):
    d = x.shape[0]
    _velocity(code, params, amp, freq, tau, x, k1)
    for i in range(d):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    _velocity(code, params, amp, freq, tau + 0.5 * h, tmp, k2)
    for i in range(d):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    _velocity(code, params, amp, freq, tau + 0.5 * h, tmp, k3)
    for i in range(d):
        tmp[i] = x[i] + h * k3[i]
    _velocity(code, params, amp, freq, tau + h, tmp, k4)
    ok = True
    for i in range(d):
        out[i] = x[i] + h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])
        if not math.isfinite(out[i]):
            ok = False
    return ok


@njit
def _inside(x, lengths, tol):
    if x[0] < 0.0 or x[0] >= lengths[0]:
        return False
    for k in range(1, x.shape[0]):
        if x[k] < -tol or x[k] > lengths[k] + tol:
            return False
    return True


@njit
def march(code, params, amp, freq, lengths, tol, eps, s, t, x, steps, stop):
    """Advance each row of ``x`` from ``s[i]`` to ``t`` in ``steps`` equal RK4 steps.

    Returns ``(exited, exit_time, exit_class, status)``; ``x`` is updated in
    place.  ``status`` is 1 if a non-finite velocity was met.
    """
    n, d = x.shape
    exited = np.zeros(n, dtype=np.bool_)
    exit_time = np.full(n, np.nan)
    exit_class = np.zeros(n, dtype=np.int8)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    xn = np.empty(d)
    xm = np.empty(d)
    x_lo = np.empty(d)
    x_hi = np.empty(d)
    for p in range(n):
        h = (t - s[p]) / steps
        if h == 0.0:
            continue
        xp = x[p]
        for k in range(steps):
            tau = s[p] + k * h
            if not _rk4_point(code, params, amp, freq, tau, h, xp, xn, k1, k2, k3, k4, tmp):
                return exited, exit_time, exit_class, 1
            if stop and not _inside(xn, lengths, tol):
                lo = 0.0
                hi = 1.0
                for i in range(d):
                    x_lo[i] = xp[i]
                    x_hi[i] = xn[i]
                for _ in range(80):
                    gap = 0.0
                    for i in range(d):
                        gap += (x_hi[i] - x_lo[i]) ** 2
                    if math.sqrt(gap) <= eps:
                        break
                    mid = 0.5 * (lo + hi)
                    _rk4_point(code, params, amp, freq, tau, mid * h, xp, xm, k1, k2, k3, k4, tmp)
                    if _inside(xm, lengths, tol):
                        lo = mid
                        for i in range(d):
                            x_lo[i] = xm[i]
                    else:
                        hi = mid
                        for i in range(d):
                            x_hi[i] = xm[i]
                exited[p] = True
                exit_time[p] = tau + 0.5 * (lo + hi) * h
                if x_hi[0] <= 0.0:
                    exit_class[p] = 1
                elif x_hi[0] >= lengths[0]:
                    exit_class[p] = 3
                else:
                    exit_class[p] = 2
                for i in range(d):
                    xp[i] = min(max(x_hi[i], 0.0), lengths[i])
                break
            for i in range(d):
                xp[i] = xn[i]
    return exited, exit_time, exit_class, 0


@njit
def _vel_1d(code, params, amp, freq, tau, x):
    f = 1.0
    if amp != 0.0 and freq != 0.0:
        f = 1.0 + amp * math.sin(freq * tau)
    if code == 0:
        return f * (params[0] + params[1] * x)
    v = 0.0
    for k in range(params.shape[0] - 1, -1, -1):
        v = v * x + params[k]
    return f * v


@njit
def _rk4_1d(code, params, amp, freq, tau, h, x):
    k1 = _vel_1d(code, params, amp, freq, tau, x)
    k2 = _vel_1d(code, params, amp, freq, tau + 0.5 * h, x + 0.5 * h * k1)
    k3 = _vel_1d(code, params, amp, freq, tau + 0.5 * h, x + 0.5 * h * k2)
    k4 = _vel_1d(code, params, amp, freq, tau + h, x + h * k3)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@njit
def march_1d(code, params, amp, freq, length, eps, s, t, x, steps):
    """Scalar specialisation of :func:`march` for ``d = 1`` with stopping."""
    n = x.shape[0]
    exited = np.zeros(n, dtype=np.bool_)
    exit_time = np.full(n, np.nan)
    exit_class = np.zeros(n, dtype=np.int8)
    for p in range(n):
        h = (t - s[p]) / steps
        if h == 0.0:
            continue
        xp = x[p, 0]
        for k in range(steps):
            tau = s[p] + k * h
            xn = _rk4_1d(code, params, amp, freq, tau, h, xp)
            if not math.isfinite(xn):
                return exited, exit_time, exit_class, 1
            if xn < 0.0 or xn >= length:
                lo = 0.0
                hi = 1.0
                x_lo = xp
                x_hi = xn
                for _ in range(80):
                    if abs(x_hi - x_lo) <= eps:
                        break
                    mid = 0.5 * (lo + hi)
                    xm = _rk4_1d(code, params, amp, freq, tau, mid * h, xp)
                    if 0.0 <= xm < length:
                        lo = mid
                        x_lo = xm
                    else:
                        hi = mid
                        x_hi = xm
                exited[p] = True
                exit_time[p] = tau + 0.5 * (lo + hi) * h
                exit_class[p] = 1 if x_hi <= 0.0 else 3
                xp = min(max(x_hi, 0.0), length)
                break
            xp = xn
        x[p, 0] = xp
    return exited, exit_time, exit_class, 0
