"""Stochastic weighted-particle solver.

Each substep of length ``dt`` runs three stages:

1. coagulation as an exact majorant jump process with positions frozen,
2. advection of every particle along its characteristic, removing exits,
3. Poisson inception over the substep, each new particle placed at its
   incepted position carried forward to the end of the substep.

Random numbers come from a Philox generator keyed by ``(seed, replica)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ScaleError
from .kernels.particles import H_CELL, H_CONST, H_GAUSS, run_coag_substep
from .measures import EnsembleMeasure, Trajectory, grid_to_ensemble, pair
from .typespace import CellDelocalisation

# n (n - 1) must stay exactly representable for the rate computation
MAX_CELL_COUNT = 2**26


def replica_rng(seed, replica):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(replica,))))


def majorant_rates(counts, hvals, K_inf, N):
    """Per-group tentative event rate ``K_inf h n (n - 1) / (2 N)``."""
    counts = np.asarray(counts, dtype=float)
    if counts.size and counts.max() > MAX_CELL_COUNT:
        raise ScaleError(f"{int(counts.max())} particles in one cell overflows the rate computation")
    return K_inf * np.asarray(hvals, float) * counts * (counts - 1) / (2.0 * N)


@dataclass
class StochasticSetup:
    flow: object
    kernel: object
    h: object
    inception: object
    dt: float


@dataclass
class ExitLog:
    times: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    masses: list = field(default_factory=list)

    def add(self, t, x, y):
        self.times.append(np.asarray(t, float))
        self.positions.append(np.asarray(x, float))
        self.masses.append(np.asarray(y, float))

    def arrays(self):
        if not self.times:
            return np.zeros(0), np.zeros((0, 1)), np.zeros(0)
        return (np.concatenate(self.times), np.concatenate(self.positions),
                np.concatenate(self.masses))


class ParticleSystem:
    """Particles ``(pos[i], y[i])`` of weight ``1 / N`` with a clock and RNG."""

    def __init__(self, positions, types, N, t, rng, dim):
        if N < 1:
            raise ValueError("N must be >= 1")
        self.N = int(N)
        self.dim = dim
        self.pos = np.asarray(positions, float).reshape(-1, dim).copy()
        self.y = np.asarray(types, float).copy()
        self.t = float(t)
        self.rng = rng
        self.exits = ExitLog()
        self.inserted = 0
        # proposals, acceptances, sum of K / K_inf over proposals
        self.stats = np.zeros(3)

    @property
    def count(self):
        return self.y.size

    def cell_index(self, h):
        if isinstance(h, CellDelocalisation):
            return h.cell_index(self.pos) if self.count else np.zeros(0, np.int64)
        return np.zeros(self.count, dtype=np.int64)


def empirical_measure(system):
    # copies: the coagulation kernel updates types in place
    return EnsembleMeasure(system.pos.copy(), system.y.copy(), np.full(system.count, 1.0 / system.N), system.t)


def _coagulate(system, setup, dt, use_numba):
    K, h = setup.kernel, setup.h
    if K.is_zero or system.count < 2:
        return
    cells = system.cell_index(h)
    if isinstance(h, CellDelocalisation):
        ngroups = h.count
        hvals = 1.0 / h.volumes
        h_code, h_width = H_CELL, 0.0
    else:
        ngroups = 1
        hvals = np.array([h.C1])
        h_code = H_CONST if h.shape == "constant" else H_GAUSS
        h_width = h.width or 0.0
    order = np.argsort(cells, kind="stable")
    counts = np.bincount(cells, minlength=ngroups)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    majorant_rates(counts, hvals, K.bound, system.N)  # overflow guard
    rate_c = K.bound * hvals / (2.0 * system.N)
    alive = np.ones(system.count, dtype=bool)
    run_coag_substep(order.astype(np.int64), starts.astype(np.int64), counts.astype(np.int64),
                     rate_c, float(dt), system.y, system.pos, alive, K.code, K.params,
                     K.bound, h_code, float(h_width), system.rng, system.stats,
                     use_numba=use_numba)
    if not alive.all():
        system.pos = system.pos[alive]
        system.y = system.y[alive]


def _advect(system, flow, t1):
    if system.count == 0 or flow.field.is_zero:
        return
    r = flow.characteristics(system.t, t1, system.pos)
    if np.any(r.exited):
        system.exits.add(r.exit_time[r.exited], r.x[r.exited], system.y[r.exited])
        keep = ~r.exited
        system.pos = r.x[keep]
        system.y = system.y[keep]
    else:
        system.pos = r.x


def _incept(system, setup, t0, t1):
    flow, dom, rng = setup.flow, setup.flow.domain, system.rng
    dt = t1 - t0
    new_pos, new_y = [], []
    for where, comps in (("bdry", setup.inception.boundary), ("int", setup.inception.interior)):
        measure = dom.inflow_area if where == "bdry" else dom.volume
        for comp in comps:
            sup = comp.rate.sup
            if sup == 0.0:
                continue
            # thinning against the profile's upper bound
            m = rng.poisson(system.N * sup * measure * dt)
            if m == 0:
                continue
            r = t0 + dt * rng.random(m)
            x = dom.sample_inflow(rng, m) if where == "bdry" else dom.sample_interior(rng, m)
            keep = rng.random(m) * sup < comp.rate(r, x)
            r, x = r[keep], x[keep]
            if r.size == 0:
                continue
            y = comp.types.sample(rng, r.size)
            if not flow.field.is_zero:
                tr = flow.characteristics(r, t1, x)
                if np.any(tr.exited):
                    system.exits.add(tr.exit_time[tr.exited], tr.x[tr.exited], y[tr.exited])
                x, y = tr.x[~tr.exited], y[~tr.exited]
            new_pos.append(x)
            new_y.append(y)
    if new_pos:
        add_y = np.concatenate(new_y)
        system.pos = np.vstack([system.pos] + new_pos)
        system.y = np.concatenate([system.y, add_y])
        system.inserted += add_y.size


def simulate(c0, T, N, seed, setup, knots=None, replica=0, use_numba=None):
    """Run one replica from ``c0`` (grid or ensemble form) over ``[c0.t, c0.t + T]``.

    Returns the trajectory of empirical measures at ``knots`` (default: every
    substep end) and the final :class:`ParticleSystem`.
    """
    if np.any(np.asarray(c0.weights if c0.kind == "ensemble" else c0.values) < 0):
        raise ValueError("c0 must be nonnegative")
    rng = replica_rng(seed, replica)
    dim = setup.flow.dim
    if c0.kind == "grid":
        ens = grid_to_ensemble(c0, N, rng)
        pos, y = ens.positions, ens.types
    else:
        # weight-w atoms become round(w N) particles
        reps = np.rint(np.asarray(c0.weights) * N).astype(np.int64)
        pos = np.repeat(c0.positions, reps, axis=0)
        y = np.repeat(c0.types, reps)
    system = ParticleSystem(pos, y, N, c0.t, rng, dim)
    t_start, t_end = c0.t, c0.t + T
    nsteps = max(1, int(round(T / setup.dt)))
    ts = t_start + (t_end - t_start) * np.arange(nsteps + 1) / nsteps
    if knots is None:
        want = set(range(nsteps + 1))
    else:
        want = {int(round((k - t_start) / (T / nsteps))) for k in knots}
    snaps_t, snaps = [], []
    if 0 in want:
        snaps_t.append(ts[0])
        snaps.append(empirical_measure(system))
    for k in range(nsteps):
        t0, t1 = ts[k], ts[k + 1]
        _coagulate(system, setup, t1 - t0, use_numba)
        _advect(system, setup.flow, t1)
        _incept(system, setup, t0, t1)
        system.t = t1
        if k + 1 in want:
            snaps_t.append(t1)
            snaps.append(empirical_measure(system))
    return Trajectory(snaps_t, snaps), system


def _replica_job(args):
    c0, T, N, seed, setup, knots, r = args
    traj, system = simulate(c0, T, N, seed, setup, knots, replica=r)
    snaps = [(m.positions.copy(), m.types.copy()) for m in traj.measures]
    return snaps, system.stats.copy(), system.exits.arrays()


def run_replicas(c0, T, N, R, seed, setup, knots, workers=1):
    """Per replica, in replica order: snapshots, event statistics and the exit log."""
    jobs = [(c0, T, N, seed, setup, list(knots), r) for r in range(R)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_replica_job, jobs))
    return [_replica_job(j) for j in jobs]


def replica_moments(c0, T, N, R, seed, setup, knots, funcs, workers=1, results=None):
    """Mean, standard error and raw values of each functional at each knot over ``R`` replicas.

    Returns ``(mean, stderr, values)`` with shapes ``(knots, funcs)`` and
    ``(R, knots, funcs)``.
    """
    if R < 2:
        raise ValueError("replica_moments needs R >= 2")
    if results is None:
        results = run_replicas(c0, T, N, R, seed, setup, knots, workers)
    vals = np.zeros((R, len(knots), len(funcs)))
    for r, (snaps, *_) in enumerate(results):
        for k, (pos, y) in enumerate(snaps):
            ens = EnsembleMeasure(pos, y, np.full(y.size, 1.0 / N), knots[k])
            for j, f in enumerate(funcs):
                vals[r, k, j] = pair(f, ens)
    mean = vals.mean(axis=0)
    stderr = vals.std(axis=0, ddof=1) / math.sqrt(R)
    return mean, stderr, vals
