"""Majorant jump process for coagulation with positions frozen over a substep.

Particles are grouped by delocalisation cell (``order``/``starts``/``counts``
from a stable sort).  Within a group of ``n`` live particles tentative events
arrive at rate ``rate_c * n (n - 1)`` with ``rate_c = K_inf * hmax / (2 N)``;
an ordered pair is drawn uniformly and accepted with probability
``K / K_inf`` (times ``h / hmax`` for smooth weights).  The survivor keeps the
position of the first particle of the pair.
"""
import math

import numpy as np

from .._accel import USE_NUMBA, njit
from ..typespace import kernel_value

H_CELL, H_CONST, H_GAUSS = 0, 1, 2


@njit
def _h_ratio(h_code, h_width, xi, xj):
    if h_code != H_GAUSS:
        return 1.0
    r2 = 0.0
    for k in range(xi.shape[0]):
        d = xi[k] - xj[k]
        r2 += d * d
    return math.exp(-0.5 * r2 / (h_width * h_width))


@njit
def coag_substep(order, starts, counts, rate_c, dt, y, pos, alive, kcode, kparams, kbound,
                 h_code, h_width, rng, stats):
    for c in range(starts.shape[0]):
        n = counts[c]
        if n < 2:
            continue
        local = order[starts[c]:starts[c] + n].copy()
        lam_c = rate_c[c]
        t = 0.0
        while n >= 2:
            t += rng.exponential(1.0 / (lam_c * n * (n - 1)))
            if t > dt:
                break
            i = rng.integers(0, n)
            j = rng.integers(0, n - 1)
            if j >= i:
                j += 1
            pi = local[i]
            pj = local[j]
            kv = kernel_value(kcode, kparams, y[pi], y[pj])
            acc = kv / kbound * _h_ratio(h_code, h_width, pos[pi], pos[pj])
            stats[0] += 1.0
            stats[2] += kv / kbound
            if rng.random() < acc:
                stats[1] += 1.0
                y[pi] = y[pi] + y[pj]
                alive[pj] = False
                local[j] = local[n - 1]
                n -= 1


def run_coag_substep(*args, use_numba=None):
    fn = coag_substep if (USE_NUMBA if use_numba is None else use_numba) else coag_substep.py_func
    fn(*args)
