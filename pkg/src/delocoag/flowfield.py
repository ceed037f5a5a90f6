"""Velocity fields, box domains and the characteristic flow map.

Positions are handled as ``(n, d)`` float arrays throughout; the single-point
helpers on :class:`FlowMap` wrap the vectorised routines.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.polynomial import Polynomial

from ._accel import USE_NUMBA
from .errors import FieldEvaluationError, FlowAssumptionViolation, IntegrationBudgetError
from .kernels.characteristics import FIELD_AFFINE, FIELD_POLY, march, march_1d

INTERIOR, INFLOW, SIDE, OUTFLOW = 0, 1, 2, 3
BOUNDARY_NAMES = {INFLOW: "inflow", SIDE: "side", OUTFLOW: "outflow"}


def as_points(x, dim):
    """Coerce a scalar, ``(d,)`` or ``(n, d)`` input to an ``(n, d)`` array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, dim) if dim > 1 or arr.size == 1 else arr.reshape(-1, 1)
    if arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FieldBounds:
    speed: float
    divergence: float
    gradient: float
    grad_divergence: float


class VelocityField:
    """Base class for prescribed velocity fields ``u_t(x)``.

    Subclasses implement the time-independent shape ``_u``, ``_div``, ``_grad``
    and ``_grad_div``; an optional modulation ``1 + A sin(w t)`` scales the
    whole field in time.
    """

    dim = 1

    def __init__(self, amplitude=0.0, frequency=0.0):
        if abs(amplitude) >= 1.0:
            raise ValueError("modulation amplitude must satisfy |A| < 1")
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)

    @property
    def steady(self):
        return self.amplitude == 0.0 or self.frequency == 0.0

    def _factor(self, t):
        """Modulation factor; ``t`` may be a scalar or a per-point array."""
        if self.steady:
            return 1.0
        return 1.0 + self.amplitude * np.sin(self.frequency * np.asarray(t, dtype=float))

    @staticmethod
    def _scale(f, arr):
        f = np.asarray(f)
        if f.ndim == 0:
            return float(f) * arr
        return f.reshape(f.shape + (1,) * (arr.ndim - 1)) * arr

    def evaluate(self, t, x):
        v = self._scale(self._factor(t), self._u(x))
        if not np.all(np.isfinite(v)):
            raise FieldEvaluationError(f"non-finite velocity near t={np.max(t)}")
        return v

    __call__ = evaluate

    def divergence(self, t, x):
        return self._scale(self._factor(t), self._div(x))

    def gradient(self, t, x):
        return self._scale(self._factor(t), self._grad(x))

    def grad_divergence(self, t, x):
        return self._scale(self._factor(t), self._grad_div(x))

    def bounds(self, domain) -> FieldBounds:
        b = self._shape_bounds(domain)
        f = 1.0 + abs(self.amplitude)
        return FieldBounds(b.speed * f, b.divergence * f, b.gradient * f, b.grad_divergence * f)

    @property
    def is_zero(self):
        return False

    def numba_spec(self):
        """``(code, params)`` for the compiled marcher, or None if unsupported."""
        return None


class ConstantField(VelocityField):
    def __init__(self, value, **modulation):
        super().__init__(**modulation)
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.dim = self.value.size

    def _u(self, x):
        return np.broadcast_to(self.value, x.shape).copy()

    def _div(self, x):
        return np.zeros(x.shape[0])

    def _grad(self, x):
        return np.zeros((x.shape[0], self.dim, self.dim))

    def _grad_div(self, x):
        return np.zeros((x.shape[0], self.dim))

    def _shape_bounds(self, domain):
        return FieldBounds(float(np.linalg.norm(self.value)), 0.0, 0.0, 0.0)

    def numba_spec(self):
        return FIELD_AFFINE, np.concatenate([self.value, np.zeros(self.dim**2)])

    @property
    def is_zero(self):
        return not np.any(self.value)


class AffineField(VelocityField):
    """``u(x) = offset + matrix @ x``; covers the linear-in-x and shear catalogue entries."""

    def __init__(self, offset, matrix, **modulation):
        super().__init__(**modulation)
        self.offset = np.atleast_1d(np.asarray(offset, dtype=float))
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.dim = self.offset.size
        if self.matrix.shape != (self.dim, self.dim):
            raise ValueError("matrix shape does not match offset")

    def _u(self, x):
        return self.offset + x @ self.matrix.T

    def _div(self, x):
        return np.full(x.shape[0], np.trace(self.matrix))

    def _grad(self, x):
        return np.broadcast_to(self.matrix, (x.shape[0], self.dim, self.dim)).copy()

    def _grad_div(self, x):
        return np.zeros((x.shape[0], self.dim))

    def numba_spec(self):
        return FIELD_AFFINE, np.concatenate([self.offset, self.matrix.ravel()])

    def _shape_bounds(self, domain):
        corners = domain.corners()
        speed = float(np.max(np.linalg.norm(self._u(corners), axis=1)))
        return FieldBounds(speed, abs(float(np.trace(self.matrix))),
                           float(np.linalg.norm(self.matrix, 2)), 0.0)


def shear_field(base_speed, shear_rate, **modulation):
    """Two-dimensional shear ``u = (base + rate * x2, 0)``."""
    return AffineField([base_speed, 0.0], [[0.0, shear_rate], [0.0, 0.0]], **modulation)


class PolynomialField(VelocityField):
    """One-dimensional ``u(x) = sum_k c_k x^k``."""

    dim = 1

    def __init__(self, coefficients, **modulation):
        super().__init__(**modulation)
        self.poly = Polynomial(np.asarray(coefficients, dtype=float))
        self.dpoly = self.poly.deriv()
        self.ddpoly = self.dpoly.deriv()

    def _u(self, x):
        return self.poly(x)

    def _div(self, x):
        return self.dpoly(x[:, 0])

    def _grad(self, x):
        return self.dpoly(x)[:, :, None]

    def _grad_div(self, x):
        return self.ddpoly(x)

    def numba_spec(self):
        return FIELD_POLY, np.asarray(self.poly.coef, dtype=float)

    @staticmethod
    def _abs_max(p, a, b):
        pts = [a, b]
        if p.degree() >= 1:
            for r in p.deriv().roots():
                if abs(r.imag) < 1e-12 and a <= r.real <= b:
                    pts.append(r.real)
        return float(np.max(np.abs(p(np.array(pts)))))

    def _shape_bounds(self, domain):
        L = domain.lengths[0]
        g = self._abs_max(self.dpoly, 0.0, L)
        return FieldBounds(self._abs_max(self.poly, 0.0, L), g, g,
                           self._abs_max(self.ddpoly, 0.0, L))


class BoxDomain:
    """``X = [0, L) x [0, W_2] x ... x [0, W_d]`` with inflow on ``x_1 = 0``.

    The face ``x_1 = L`` is the outflow boundary and the remaining faces are
    side walls.  A point within ``tol`` of a side wall counts as interior.
    """

    def __init__(self, lengths, tol=None):
        self.lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
        if np.any(self.lengths <= 0):
            raise ValueError("domain lengths must be positive")
        self.dim = self.lengths.size
        self.tol = 1e-8 * self.diameter if tol is None else float(tol)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.lengths))

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    @property
    def inflow_area(self):
        return float(np.prod(self.lengths[1:])) if self.dim > 1 else 1.0

    def corners(self):
        grids = np.meshgrid(*[[0.0, L] for L in self.lengths], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        ok = (x[:, 0] >= 0.0) & (x[:, 0] < self.lengths[0])
        if self.dim > 1:
            side = x[:, 1:]
            ok &= np.all((side >= -self.tol) & (side <= self.lengths[1:] + self.tol), axis=1)
        return ok

    def boundary_class(self, x):
        """Classify positions on (or just beyond) the boundary by face."""
        x = np.asarray(x, dtype=float)
        cls = np.full(x.shape[0], SIDE, dtype=np.int8)
        cls[x[:, 0] <= 0.0] = INFLOW
        cls[x[:, 0] >= self.lengths[0]] = OUTFLOW
        return cls

    def normal(self, x):
        """Outward unit normal of the face closest to each point."""
        x = np.asarray(x, dtype=float)
        dist = np.concatenate([x, self.lengths - x], axis=1)
        face = np.argmin(dist, axis=1)
        n = np.zeros_like(x)
        axis = face % self.dim
        sign = np.where(face < self.dim, -1.0, 1.0)
        n[np.arange(x.shape[0]), axis] = sign
        return n

    def project(self, x):
        return np.clip(x, 0.0, self.lengths)

    def inflow_quadrature(self, n_per_axis=8):
        """Midpoint nodes and surface weights on the inflow face."""
        if self.dim == 1:
            return np.zeros((1, 1)), np.ones(1)
        axes = []
        for W in self.lengths[1:]:
            h = W / n_per_axis
            axes.append((np.arange(n_per_axis) + 0.5) * h)
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([np.zeros(grids[0].size)] + [g.ravel() for g in grids], axis=1)
        w = np.full(pts.shape[0], self.inflow_area / pts.shape[0])
        return pts, w

    def sample_inflow(self, rng, m):
        pts = np.zeros((m, self.dim))
        if self.dim > 1:
            pts[:, 1:] = rng.random((m, self.dim - 1)) * self.lengths[1:]
        return pts

    def sample_interior(self, rng, m):
        return rng.random((m, self.dim)) * self.lengths

    def check_classifier(self, field, times, n_per_axis=5):
        """Fraction of sampled boundary points whose face class matches sign(n.u)."""
        pts = []
        for k in range(self.dim):
            for val in (0.0, self.lengths[k]):
                grids = np.meshgrid(*[np.linspace(0.0, L, n_per_axis) for L in self.lengths],
                                    indexing="ij")
                p = np.stack([g.ravel() for g in grids], axis=1)
                p[:, k] = val
                # keep corners out: their normal is ambiguous
                inner = np.ones(p.shape[0], bool)
                for j in range(self.dim):
                    if j != k:
                        inner &= (p[:, j] > 0.0) & (p[:, j] < self.lengths[j])
                pts.append(p[inner] if self.dim > 1 else p)
        pts = np.concatenate(pts)
        cls = self.boundary_class(pts)
        n = self.normal(pts)
        agree = 0
        total = 0
        for t in times:
            flux = np.sum(n * field.evaluate(t, pts), axis=1)
            scale = max(1.0, float(np.max(np.abs(flux))))
            sign_cls = np.where(flux < -1e-12 * scale, INFLOW,
                                np.where(flux > 1e-12 * scale, OUTFLOW, SIDE))
            agree += int(np.sum(sign_cls == cls))
            total += cls.size
        return agree / total


class MarchResult(NamedTuple):
    x: np.ndarray
    exited: np.ndarray
    exit_time: np.ndarray
    exit_class: np.ndarray
    logj: np.ndarray | None
    grad: np.ndarray | None


@dataclass(frozen=True)
class ExitRecord:
    time: float
    position: np.ndarray
    boundary: str


@dataclass(frozen=True)
class EntryData:
    time: float
    position: np.ndarray
    entered_through: str


class FlowMap:
    """Characteristics of a velocity field on a domain.

    Integration uses fixed-step classical RK4 with ``n = ceil(|t - s| / dtau)``
    equal steps; boundary crossings are localised by bisection on the step
    fraction until the bracketing positions are within ``eps_bdry``.
    """

    def __init__(self, field, domain, dtau=None, eps_bdry=None, max_steps=1_000_000,
                 no_outflow=False, safety=1.1, residence_samples=9, residence_horizon=None,
                 use_numba=None):
        if field.dim != domain.dim:
            raise ValueError("field and domain dimensions differ")
        self.field = field
        self.domain = domain
        self.dim = domain.dim
        self.eps_bdry = 1e-8 * domain.diameter if eps_bdry is None else float(eps_bdry)
        self.max_steps = int(max_steps)
        self.no_outflow = bool(no_outflow) or field.is_zero
        self.safety = float(safety)
        self.residence_samples = int(residence_samples)
        self.residence_horizon = residence_horizon
        self._t0 = None
        self.use_numba = USE_NUMBA if use_numba is None else bool(use_numba)
        self._spec = field.numba_spec()
        self._entry_cache = {}
        self._cache_lock = threading.Lock()
        if dtau is not None:
            self.dtau = float(dtau)
        elif self.no_outflow:
            self.dtau = 1e-3
        else:
            # provisional step from the crossing time, then t0 / 1000
            speed = max(field.bounds(domain).speed, 1e-300)
            self.dtau = domain.diameter / speed / 1000.0
            self.dtau = self.residence_bound() / 1000.0

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_entry_cache"] = {}
        del state["_cache_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._cache_lock = threading.Lock()

    # -- integrator core -------------------------------------------------
    def _deriv(self, tau, x, with_logj, G):
        v = self.field.evaluate(tau, x)
        dl = self.field.divergence(tau, x) if with_logj else None
        dG = None
        if G is not None:
            dG = np.einsum("nij,njk->nik", self.field.gradient(tau, x), G)
        return v, dl, dG

    def _rk4(self, tau, h, x, lj, G):
        # h may be a per-point array (bisection); stage times follow it
        h = np.asarray(h, dtype=float)
        hc = h[:, None] if h.ndim else h
        hg = h[:, None, None] if h.ndim else h
        with_logj = lj is not None
        t_half = tau + 0.5 * h
        k1 = self._deriv(tau, x, with_logj, G)
        k2 = self._deriv(t_half, x + 0.5 * hc * k1[0], with_logj,
                         None if G is None else G + 0.5 * hg * k1[2])
        k3 = self._deriv(t_half, x + 0.5 * hc * k2[0], with_logj,
                         None if G is None else G + 0.5 * hg * k2[2])
        k4 = self._deriv(tau + h, x + hc * k3[0], with_logj,
                         None if G is None else G + hg * k3[2])
        xn = x + hc / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        ljn = None
        if with_logj:
            ljn = lj + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Gn = None
        if G is not None:
            Gn = G + hg / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        return xn, ljn, Gn

    def _nsteps(self, span):
        if span == 0.0:
            return 0
        n = max(1, math.ceil(span / self.dtau * (1.0 - 1e-12)))
        if n > self.max_steps:
            raise IntegrationBudgetError(
                f"{n} steps needed for |t-s|={span:g} exceeds budget {self.max_steps}")
        return n

    def characteristics(self, s, t, x, stop=True, logj=False, grad=False) -> MarchResult:
        """Integrate ``x`` (``(n, d)``) from time ``s`` to ``t``.

        ``s`` and ``t`` may be per-point arrays of times.  With ``stop`` the
        trajectories are halted at the first boundary crossing; ``x`` then
        holds the exit position and ``logj``/``grad`` the values at exit.
        """
        x = as_points(x, self.dim).copy()
        n = x.shape[0]
        s = np.broadcast_to(np.asarray(s, dtype=float), (n,))
        lj = np.zeros(n) if logj else None
        G = np.tile(np.eye(self.dim), (n, 1, 1)) if grad else None
        exited = np.zeros(n, dtype=bool)
        exit_time = np.full(n, np.nan)
        exit_class = np.zeros(n, dtype=np.int8)
        if n == 0:
            return MarchResult(x, exited, exit_time, exit_class, lj, G)
        steps = self._nsteps(float(np.max(np.abs(t - s))))
        if steps == 0:
            return MarchResult(x, exited, exit_time, exit_class, lj, G)
        compiled = self.use_numba and self._spec is not None and np.ndim(t) == 0
        if compiled and not logj and not grad:
            return self._march_compiled(s, t, x, steps, stop)
        h_all = (t - s) / steps
        active = np.flatnonzero(h_all != 0.0)
        for k in range(steps):
            if active.size == 0:
                break
            h = h_all[active]
            tau = s[active] + k * h
            xa = x[active]
            la = None if lj is None else lj[active]
            Ga = None if G is None else G[active]
            xn, ln, Gn = self._rk4(tau, h, xa, la, Ga)
            keep = slice(None)
            if stop:
                inside = self.domain.contains(xn)
                if not np.all(inside):
                    out = ~inside
                    idx = active[out]
                    et, ex, el, eG = self._bisect(tau[out], h[out], xa[out],
                                                  None if la is None else la[out],
                                                  None if Ga is None else Ga[out])
                    x[idx] = self.domain.project(ex)
                    exited[idx] = True
                    exit_time[idx] = et
                    exit_class[idx] = self.domain.boundary_class(ex)
                    if lj is not None:
                        lj[idx] = el
                    if G is not None:
                        G[idx] = eG
                    keep = inside
            tgt = active[keep]
            x[tgt] = xn[keep]
            if lj is not None:
                lj[tgt] = ln[keep]
            if G is not None:
                G[tgt] = Gn[keep]
            active = tgt
        return MarchResult(x, exited, exit_time, exit_class, lj, G)

    def _march_compiled(self, s, t, x, steps, stop=True):
        code, params = self._spec
        x = np.ascontiguousarray(x)
        s = np.ascontiguousarray(s, dtype=float)
        amp, freq = self.field.amplitude, self.field.frequency
        if self.dim == 1 and stop:
            exited, etime, ecls, status = march_1d(
                code, params, amp, freq, float(self.domain.lengths[0]), self.eps_bdry, s,
                float(t), x, steps)
        else:
            exited, etime, ecls, status = march(
                code, params, amp, freq, self.domain.lengths, self.domain.tol, self.eps_bdry,
                s, float(t), x, steps, stop)
        if status:
            raise FieldEvaluationError("non-finite velocity along a characteristic")
        return MarchResult(x, exited, etime, ecls, None, None)

    def _bisect(self, tau, h, x0, lj0, G0):
        m = x0.shape[0]
        lo = np.zeros(m)
        hi = np.ones(m)
        x_lo = x0.copy()
        x_hi, l_hi, G_hi = self._rk4(tau, h, x0, lj0, G0)
        for _ in range(80):
            if np.all(np.linalg.norm(x_hi - x_lo, axis=1) <= self.eps_bdry):
                break
            mid = 0.5 * (lo + hi)
            xm, lm, Gm = self._rk4(tau, mid * h, x0, lj0, G0)
            inside = self.domain.contains(xm)
            lo = np.where(inside, mid, lo)
            x_lo = np.where(inside[:, None], xm, x_lo)
            hi = np.where(inside, hi, mid)
            x_hi = np.where(inside[:, None], x_hi, xm)
            if l_hi is not None:
                l_hi = np.where(inside, l_hi, lm)
            if G_hi is not None:
                G_hi = np.where(inside[:, None, None], G_hi, Gm)
        return tau + 0.5 * (lo + hi) * h, x_hi, l_hi, G_hi

    # -- public single-point operations -------------------------------
    def advect(self, s, t, x):
        """Position ``Phi_{s,t}(x)``, or an :class:`ExitRecord` if the path leaves X."""
        r = self.characteristics(s, t, x)
        if r.exited[0]:
            return ExitRecord(float(r.exit_time[0]), r.x[0].copy(),
                              BOUNDARY_NAMES[int(r.exit_class[0])])
        return r.x[0].copy()

    def liouville_weight(self, s, t, x):
        """``det grad Phi_{s,t}(x) = exp int_s^t div u_r(Phi_{s,r}(x)) dr``."""
        return float(self.liouville_weights(s, t, x)[0])

    def liouville_weights(self, s, t, x):
        return np.exp(self.characteristics(s, t, x, stop=False, logj=True).logj)

    def flow_gradient(self, s, t, x):
        """Jacobian matrix of the flow map from the variational equation."""
        return self.characteristics(s, t, x, stop=False, grad=True).grad[0].copy()

    def entry_data(self, t, x):
        key = (float(t), tuple(as_points(x, self.dim)[0]))
        cached = self._entry_cache.get(key)
        if cached is not None:
            return cached
        s, xi, through = self.entry_data_many(t, x)
        out = EntryData(float(s[0]), xi[0].copy(), "inflow" if through[0] else "initial")
        with self._cache_lock:
            self._entry_cache.setdefault(key, out)
        return out

    def entry_data_many(self, t, x):
        """Entry times, entry positions and an ``entered through inflow`` mask."""
        r = self.characteristics(t, 0.0, x)
        bad = r.exited & (r.exit_class != INFLOW)
        if np.any(bad):
            raise FlowAssumptionViolation(
                "backward characteristic left through a side or outflow boundary")
        s = np.where(r.exited, r.exit_time, 0.0)
        return s, r.x, r.exited

    def forward_exit_times(self, s, x, chunk=256):
        """Forward exit time of each point, marching until all have left X."""
        x = as_points(x, self.dim).copy()
        times = np.full(x.shape[0], np.nan)
        active = np.arange(x.shape[0])
        tau = float(s)
        used = 0
        while active.size:
            span = chunk * self.dtau
            r = self.characteristics(tau, tau + span, x[active])
            times[active[r.exited]] = r.exit_time[r.exited]
            x[active] = r.x
            active = active[~r.exited]
            tau += span
            used += chunk
            if used > self.max_steps:
                raise IntegrationBudgetError("trajectory did not exit within the step budget")
        return times - s

    def residence_bound(self):
        """Sampled upper bound ``t0`` on residence time, times the safety factor."""
        if self._t0 is not None:
            return self._t0
        if self.no_outflow:
            self._t0 = math.inf
            return self._t0
        dom = self.domain
        k = self.residence_samples
        inflow, _ = dom.inflow_quadrature(k)
        if dom.dim > 1:
            inflow = np.concatenate([inflow, dom.corners()[dom.corners()[:, 0] == 0.0]])
        grids = np.meshgrid(*[np.linspace(0.0, L, k, endpoint=False) for L in dom.lengths],
                            indexing="ij")
        initial = np.stack([g.ravel() for g in grids], axis=1)
        if self.field.steady:
            starts = [0.0]
        else:
            horizon = self.residence_horizon
            if horizon is None:
                horizon = 2 * math.pi / self.field.frequency
            starts = list(np.linspace(0.0, horizon, k))
        worst = 0.0
        try:
            for s in starts:
                worst = max(worst, float(np.max(self.forward_exit_times(s, inflow))))
            worst = max(worst, float(np.max(self.forward_exit_times(0.0, initial))))
        except IntegrationBudgetError as exc:
            raise FlowAssumptionViolation(f"residence time is not bounded: {exc}") from exc
        self._t0 = worst * self.safety
        return self._t0
