"""Deterministic solver: split propagator, fixed-point map, Picard iteration and direct stepping.

All measures here are in grid form.  A step from ``t_k`` to ``t_k + dt``
applies coagulation with the parameter frozen at ``t_k``, then transport,
then the inception that occurred during the step (Lie).  The Strang variant
uses two half coagulation steps around transport.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContainmentError, NoConvergenceError, NonContractiveWarning
from .measures import CoagOperator, GridMeasure, GridTransport, Trajectory, tv_norm

SPLITTINGS = ("lie", "strang")
COAG_METHODS = ("euler", "exponential")


@dataclass
class PropagatorSchedule:
    """Step size, splitting and coagulation integrator, plus the model pieces."""

    dt: float
    flow: object
    grid: object
    bins: object
    kernel: object
    h: object
    splitting: str = "lie"
    coag_method: str = "euler"
    coag_substeps: int = 1
    use_numba: bool | None = None
    transport: GridTransport = field(init=False, repr=False)
    coag: CoagOperator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.splitting not in SPLITTINGS:
            raise ValueError(f"splitting must be one of {SPLITTINGS}")
        if self.coag_method not in COAG_METHODS:
            raise ValueError(f"coag_method must be one of {COAG_METHODS}")
        t0 = self.flow.residence_bound()
        if math.isfinite(t0) and self.dt > t0 / 10 * (1 + 1e-12):
            raise ValueError(f"dt={self.dt:g} exceeds t0/10={t0 / 10:g}")
        self.transport = GridTransport(self.flow, self.grid)
        self.coag = CoagOperator(self.grid, self.bins, self.kernel, self.h, self.use_numba)
        self._warned = False

    @property
    def t0(self):
        return self.flow.residence_bound()

    @property
    def coag_constant(self):
        """``(3/2) K_inf C1``, the generator norm per unit parameter mass."""
        return 1.5 * self.kernel.bound * self.h.C1

    def _check_contractive(self, mu_tv):
        if not self._warned and self.coag_constant * mu_tv * self.dt > 0.5:
            self._warned = True
            warnings.warn(f"(3/2) K_inf C1 |mu| dt = {self.coag_constant * mu_tv * self.dt:.3g}"
                          " > 0.5; Euler loss clipping may activate", NonContractiveWarning,
                          stacklevel=3)

    # -- substeps --------------------------------------------------------
    def coag_advance(self, values, param, dt, refresh=False):
        """Advance coagulation over ``dt``.

        ``refresh`` re-uses the current state as the parameter on every
        sub-cycle (self-consistent stepping); otherwise ``param`` is frozen.
        """
        if self.kernel.is_zero:
            return values
        m = self.coag_substeps
        h = dt / m
        for _ in range(m):
            p = values if refresh else param
            self._check_contractive(float(np.sum(np.abs(p))))
            gain, lr = self.coag.rates(values, p)
            if self.coag_method == "exponential":
                values = values * np.exp(-h * lr) + h * gain
            else:
                loss = h * lr * values
                pos = values > 0
                loss[pos] = np.minimum(loss[pos], values[pos])
                values = values + h * gain - loss
        return values

    def coag_dual(self, fvals, param, dt):
        if self.kernel.is_zero:
            return fvals
        m = self.coag_substeps
        for _ in range(m):
            fvals = fvals + dt / m * self.coag.dual_apply(fvals, param)
        return fvals

    def inception(self, model, s, t):
        """Measure added by interior and boundary inception during ``(s, t]``."""
        out = self.transport.boundary_deposit(model, self.bins, s, t)
        comps = [c for c in model.interior if not c.rate.is_zero]
        if comps:
            mid = 0.5 * (s + t)
            for comp in comps:
                cellmass = comp.rate(mid, self.grid.centers) * self.grid.volume * (t - s)
                out += np.outer(cellmass, self.bins.deposit(np.asarray(comp.types.masses),
                                                            np.asarray(comp.types.probs)))
        return out

    def step(self, values, t, dt, param, model=None, refresh=False):
        """One split step from ``t`` to ``t + dt``; returns new values and outflow."""
        if self.splitting == "lie":
            values = self.coag_advance(values, param, dt, refresh)
            values, out = self.transport.apply(values, t, t + dt)
        else:
            values = self.coag_advance(values, param, 0.5 * dt, refresh)
            values, out = self.transport.apply(values, t, t + dt)
        if model is not None:
            values = values + self.inception(model, t, t + dt)
        if self.splitting == "strang":
            values = self.coag_advance(values, values if refresh else param, 0.5 * dt, refresh)
        return values, out

    def dual_step(self, fvals, t, dt, param, transport_mode="adjoint"):
        """Adjoint of :meth:`step` without inception, acting on node values of a test function."""
        if self.splitting == "lie":
            fvals = self.transport.dual_apply(fvals, t, t + dt, mode=transport_mode)
            return self.coag_dual(fvals, param, dt)
        fvals = self.coag_dual(fvals, param, 0.5 * dt)
        fvals = self.transport.dual_apply(fvals, t, t + dt, mode=transport_mode)
        return self.coag_dual(fvals, param, 0.5 * dt)

    def knots(self, s, t):
        n = max(0, int(round((t - s) / self.dt)))
        if n and abs(s + n * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            n = int(math.floor((t - s) / self.dt + 1e-9))
        ts = list(s + self.dt * np.arange(n + 1))
        if t - ts[-1] > 1e-12 * max(1.0, abs(t)):
            ts.append(t)
        return np.array(ts)


@dataclass
class StepLog:
    """Per-step outflow measure (number and type mass)."""

    times: list = field(default_factory=list)
    outflow_number: list = field(default_factory=list)
    outflow_mass: list = field(default_factory=list)

    def record(self, t, out, pivots):
        self.times.append(t)
        self.outflow_number.append(float(np.sum(out)))
        self.outflow_mass.append(float(np.sum(out * pivots)))


def _evolve(sched, c0, s, t, param_at, model=None, refresh=False, log=None):
    ts = sched.knots(s, t)
    vals = np.array(c0.values)
    out = [c0.with_values(vals, ts[0])]
    for k in range(ts.size - 1):
        dt = ts[k + 1] - ts[k]
        param = None if refresh else param_at(ts[k])
        vals, flux = sched.step(vals, ts[k], dt, param, model, refresh)
        if log is not None:
            log.record(ts[k + 1], flux, sched.bins.pivots)
        out.append(c0.with_values(vals, ts[k + 1]))
    return Trajectory(ts, out)


def propagator_apply(mu_param, c, s, t, sched):
    """``A~^{t,s}[mu] c`` by splitting; ``mu_param`` is a :class:`Trajectory`."""
    traj = _evolve(sched, c, s, t, lambda tk: np.asarray(mu_param.at(tk).values))
    return traj.measures[-1]


def dual_propagator_apply(mu_param, fvals, s, t, sched, transport_mode="adjoint"):
    """Function-side splitting: the adjoint steps applied in reverse order."""
    ts = sched.knots(s, t)
    f = np.array(fvals, dtype=float)
    for k in range(ts.size - 2, -1, -1):
        f = sched.dual_step(f, ts[k], ts[k + 1] - ts[k], np.asarray(mu_param.at(ts[k]).values),
                            transport_mode)
    return f


def psi_apply(mu_param, c0, T, sched, model, t_start=0.0, log=None):
    """Fixed-point map: the split evolution of ``c0`` with parameter ``mu_param`` plus inception."""
    return _evolve(sched, c0, t_start, t_start + T,
                   lambda tk: np.asarray(mu_param.at(tk).values), model, log=log)


def direct_solve(c0, T, sched, model, log=None):
    """Self-consistent stepping with the parameter equal to the current state."""
    return _evolve(sched, c0, c0.t, c0.t + T, None, model, refresh=True, log=log)


def inception_boundary_deposit(c, t, dt, model, flow, transport=None):
    """``c`` plus the boundary inception of ``(t, t + dt]`` placed at time ``t + dt``."""
    tr = transport or GridTransport(flow, c.grid)
    return c.with_values(np.asarray(c.values) + tr.boundary_deposit(model, c.bins, t, t + dt),
                         t + dt)


# -- fixed point --------------------------------------------------------------

def tau_M(M, c0_tv, sup_I, K_inf, C1):
    """Containment horizon ``2 log r_M / (3 K_inf C1 M)``."""
    denom = c0_tv + 2.0 * sup_I / (3.0 * K_inf * C1 * M)
    r = math.inf if denom == 0 else M / denom
    if r <= 1.0:
        raise ContainmentError(f"M={M:g} does not exceed |c0| + 2 sup|I| / (3 K C1 M) = {denom:g}")
    return 2.0 * math.log(r) / (3.0 * K_inf * C1 * M)


@dataclass
class FixedPointConfig:
    M: float
    tau: float | None = None
    tol: float = 1e-10
    max_iter: int = 60
    ratio_limit: float = 0.95

    def validate(self, c0_tv, sup_I, K_inf, C1):
        need = c0_tv + 2.0 * sup_I / (3.0 * K_inf * C1 * self.M)
        if not self.M > need:
            raise ContainmentError(f"M={self.M:g} must exceed {need:g}")

    @classmethod
    def for_positive_data(cls, c0_tv, sup_I, t0, T, **kw):
        """Global radius ``|c0| + t0 sup|I|`` (``T`` replaces ``t0`` when there is no outflow)."""
        return cls(M=c0_tv + min(t0, T) * sup_I, **kw)


@dataclass
class PicardWindow:
    start: float
    length: float
    iterations: int
    ratio: float
    distances: list


@dataclass
class PicardResult:
    trajectory: Trajectory
    windows: list
    tau_M: float
    M: float


def _sup_distance(a, b):
    return max(float(np.sum(np.abs(np.asarray(x.values) - np.asarray(y.values))))
               for x, y in zip(a.measures, b.measures))


def picard_solve(c0, T, cfg, sched, model, sup_I=None):
    """Windowed Picard iteration of the fixed-point map.

    The window is ``tau_M`` floored to a multiple of ``dt`` (at least one step)
    and is halved whenever the measured contraction ratio reaches
    ``cfg.ratio_limit`` or the iteration budget runs out.
    """
    c0_tv = tv_norm(c0)
    if sup_I is None:
        sup_I = model.sup_total(sched.grid.domain)
    K_inf, C1 = sched.kernel.bound, sched.h.C1
    cfg.validate(c0_tv, sup_I, K_inf, C1)
    tau = cfg.tau if cfg.tau is not None else tau_M(cfg.M, c0_tv, sup_I, K_inf, C1)
    steps = max(1, int(math.floor(min(tau, T) / sched.dt + 1e-9)))
    t_end = c0.t + T
    state = c0
    traj = None
    windows = []
    scale = max(1.0, cfg.M)
    while state.t < t_end - 1e-12:
        n = steps
        while True:
            length = min(n * sched.dt, t_end - state.t)
            ts = sched.knots(state.t, state.t + length)
            mu = Trajectory.constant(state, ts)
            dists = []
            ok = False
            for j in range(cfg.max_iter):
                nxt = psi_apply(mu, state, length, sched, model, t_start=state.t)
                if nxt.sup_tv() > cfg.M + 1e-9 * scale:
                    raise ContainmentError(
                        f"iterate reached TV {nxt.sup_tv():.6g} > M={cfg.M:g} at t={state.t:g}")
                dists.append(_sup_distance(nxt, mu))
                mu = nxt
                if dists[-1] < cfg.tol * scale:
                    ok = True
                    break
            ratio = _ratio(dists, cfg.tol * scale)
            if ok and ratio < cfg.ratio_limit:
                break
            if n == 1:
                raise NoConvergenceError(
                    f"Picard iteration failed on a single step at t={state.t:g}", ratio)
            n = max(1, n // 2)
        windows.append(PicardWindow(state.t, length, len(dists) - 1 if len(dists) > 1 else 1,
                                    ratio, dists))
        traj = mu if traj is None else traj.concat(mu)
        state = mu.measures[-1]
    return PicardResult(traj, windows, tau, cfg.M)


def _ratio(dists, tol):
    r = 0.0
    for a, b in zip(dists[:-1], dists[1:]):
        if a > 100 * tol:
            r = max(r, b / a)
    return r


# -- Lipschitz dependence on initial data ------------------------------------

def lipschitz_constant_C4(M, K_inf, C1, t0, c0_tv, sup_I):
    k = 1.5 * K_inf * C1
    if k * M * t0 > 700:
        return math.inf
    return k * math.exp(k * M * t0) * (c0_tv + t0 * sup_I)


def lipschitz_initialdata_check(c0a, c0b, T, sched, model, M=None, slack=1e-6):
    """Evaluate both sides of the Lipschitz-in-initial-data inequality at every knot."""
    a = direct_solve(c0a, T, sched, model)
    b = direct_solve(c0b, T, sched, model)
    t0 = sched.t0
    sup_I = model.sup_total(sched.grid.domain)
    ta, tb = tv_norm(c0a), tv_norm(c0b)
    if M is None:
        M = max(ta, tb) + min(t0, T) * sup_I
    K_inf, C1 = sched.kernel.bound, sched.h.C1
    t0_eff = t0 if math.isfinite(t0) else T
    C4 = lipschitz_constant_C4(M, K_inf, C1, t0_eff, ta, sup_I)
    d0 = tv_norm(c0a - c0b)
    lhs, rhs = [], []
    for t, ma, mb in zip(a.times, a.measures, b.measures):
        lhs.append(float(np.sum(np.abs(np.asarray(ma.values) - np.asarray(mb.values)))))
        rel = t - c0a.t
        expo = 1.5 * K_inf * C1 * M * min(rel, t0_eff) + C4 * rel
        rhs.append(d0 * math.exp(expo) if expo < 700 else math.inf)
    lhs, rhs = np.array(lhs), np.array(rhs)
    return {"times": a.times, "lhs": lhs, "rhs": rhs, "C4": C4, "M": M,
            "passed": bool(np.all(lhs <= rhs + slack))}
