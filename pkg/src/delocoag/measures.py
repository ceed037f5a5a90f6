"""Finite signed measures on position x type and the operators acting on them.

Two representations are supported.  :class:`EnsembleMeasure` is a list of
weighted atoms ``(x_i, y_i, w_i)``.  :class:`GridMeasure` stores, for every
spatial cell and type pivot, the measure of that cell-bin pair; the density
is that value divided by the cell volume.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FlowAssumptionViolation, RepresentationError
from .flowfield import INFLOW
from .kernels.coag_bins import BinGain
from .typespace import CellDelocalisation


class CellGrid:
    """Uniform tensor grid of cells over a box domain (C order flattening)."""

    def __init__(self, domain, shape):
        self.domain = domain
        self.shape = tuple(int(c) for c in np.broadcast_to(shape, (domain.dim,)))
        self.dim = domain.dim
        self.widths = domain.lengths / np.array(self.shape)
        self.volume = float(np.prod(self.widths))
        self.ncell = int(np.prod(self.shape))
        axes = [(np.arange(n) + 0.5) * w for n, w in zip(self.shape, self.widths)]
        grids = np.meshgrid(*axes, indexing="ij")
        self.centers = np.stack([g.ravel() for g in grids], axis=1)
        self.edges = [np.arange(n + 1) * w for n, w in zip(self.shape, self.widths)]

    def cell_index(self, x):
        idx = np.floor(np.asarray(x, float) / self.widths).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.shape) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def subpoints(self, m):
        """``(ncell, m**d, d)`` midpoint sub-points of every cell."""
        frac = (np.arange(m) + 0.5) / m - 0.5
        offs = np.stack([g.ravel() for g in np.meshgrid(*([frac] * self.dim), indexing="ij")],
                        axis=1) * self.widths
        return self.centers[:, None, :] + offs[None, :, :]

    def interpolate(self, values, x):
        """Multilinear interpolation of cell-centre ``values`` (``(ncell, k)``) at ``x``.

        Points beyond the outermost centres take the nearest centre value.
        """
        vals = values.reshape(self.shape + values.shape[1:])
        x = np.asarray(x, float)
        u = x / self.widths - 0.5
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        out = 0.0
        for corner in np.ndindex(*([2] * self.dim)):
            wgt = np.ones(x.shape[0])
            idx = []
            for k, c in enumerate(corner):
                wgt = wgt * (frac[:, k] if c else 1.0 - frac[:, k])
                idx.append(np.clip(i0[:, k] + c, 0, self.shape[k] - 1))
            out = out + wgt[:, None] * vals[tuple(idx)]
        return out

    def spec(self):
        return {"shape": list(self.shape), "lengths": self.domain.lengths.tolist()}


class TypeBins:
    """Type pivots with a number- and mass-conserving split of merged types."""

    def __init__(self, pivots):
        p = np.unique(np.asarray(pivots, dtype=float))
        if p.size == 0 or np.any(p <= 0):
            raise ValueError("pivots must be positive")
        self.pivots = p
        self.nb = p.size
        if self.nb > 1:
            mids = np.sqrt(p[:-1] * p[1:])
            first = p[0] * math.sqrt(p[0] / p[1])
            last = p[-1] * math.sqrt(p[-1] / p[-2])
        else:
            mids, first, last = np.array([]), p[0] / 2, p[0] * 2
        self.lo_edges = np.concatenate([[first], mids])
        self.hi_edges = np.concatenate([mids, [last]])
        lo, wlo, whi = self.split(p[:, None] + p[None, :])
        self.merge_lo, self.merge_wlo, self.merge_whi = lo, wlo, whi
        self._gain = {}

    @classmethod
    def geometric(cls, y_min, y_max, ratio=2 ** 0.25, extra=()):
        n = int(math.floor(math.log(y_max / y_min) / math.log(ratio) + 1e-9))
        piv = list(y_min * ratio ** np.arange(n + 1))
        for e in extra:
            if not any(math.isclose(e, q, rel_tol=1e-9) for q in piv):
                piv.append(float(e))
        return cls(piv)

    def split(self, y):
        """Lower pivot index and the two weights for each merged type ``y``."""
        y = np.asarray(y, dtype=float)
        p = self.pivots
        k = np.searchsorted(p, y, side="right") - 1
        k = np.clip(k, 0, self.nb - 1)
        inner = (y >= p[0]) & (k < self.nb - 1)
        kk = np.minimum(k, self.nb - 2) if self.nb > 1 else k
        if self.nb > 1:
            whi = np.where(inner, (y - p[kk]) / (p[kk + 1] - p[kk]), 0.0)
        else:
            whi = np.zeros_like(y)
        whi = np.where(np.isclose(y, p[k], rtol=1e-12, atol=0.0), 0.0, whi)
        return k.astype(np.int64), 1.0 - whi, whi

    def bin_index(self, y):
        """Nearest pivot in log scale (used only for consolidation and output)."""
        y = np.asarray(y, float)
        k = np.searchsorted(self.hi_edges, y, side="right")
        return np.clip(k, 0, self.nb - 1)

    def gain_op(self, use_numba=None):
        key = use_numba
        if key not in self._gain:
            self._gain[key] = BinGain(self.merge_lo, self.merge_wlo, self.merge_whi, use_numba)
        return self._gain[key]

    def deposit(self, y, weights, ncell=None, cells=None):
        """Histogram ``weights`` at types ``y`` onto pivots via the same split."""
        k, wlo, whi = self.split(y)
        if cells is None:
            out = np.zeros(self.nb)
            np.add.at(out, k, weights * wlo)
            up = k + 1 < self.nb
            np.add.at(out, k[up] + 1, (weights * whi)[up])
            return out
        out = np.zeros((ncell, self.nb))
        np.add.at(out, (cells, k), weights * wlo)
        up = k + 1 < self.nb
        np.add.at(out, (cells[up], k[up] + 1), (weights * whi)[up])
        return out


class EnsembleMeasure:
    """Weighted atoms ``(positions[i], types[i], weights[i])``."""

    kind = "ensemble"

    def __init__(self, positions, types, weights, t=0.0, dim=None):
        pos = np.asarray(positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, dim or 1)
        self.positions = pos
        self.types = np.asarray(types, dtype=float).ravel()
        self.weights = np.broadcast_to(np.asarray(weights, dtype=float),
                                       self.types.shape).copy()
        self.t = float(t)
        for a in (self.positions, self.types, self.weights):
            a.flags.writeable = False

    @classmethod
    def empty(cls, dim, t=0.0):
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0), t)

    @property
    def size(self):
        return self.types.size

    def with_time(self, t):
        return EnsembleMeasure(self.positions, self.types, self.weights, t)


class GridMeasure:
    """Per-cell histograms over type pivots; ``values[i, a]`` is a measure, not a density."""

    kind = "grid"

    def __init__(self, grid, bins, values, t=0.0):
        v = np.array(values, dtype=float)
        if v.shape != (grid.ncell, bins.nb):
            raise ValueError(f"values shape {v.shape} != {(grid.ncell, bins.nb)}")
        v.flags.writeable = False
        self.grid, self.bins, self.values, self.t = grid, bins, v, float(t)

    @classmethod
    def zeros(cls, grid, bins, t=0.0):
        return cls(grid, bins, np.zeros((grid.ncell, bins.nb)), t)

    @classmethod
    def from_density(cls, grid, bins, density, mass, t=0.0):
        """Cell density ``density(x)`` (``(n,)``) of particles of type ``mass``."""
        v = np.zeros((grid.ncell, bins.nb))
        dens = np.asarray(density(grid.centers), float) * grid.volume
        k, wlo, whi = bins.split(np.array([mass]))
        v[:, k[0]] += dens * wlo[0]
        if whi[0] > 0:
            v[:, k[0] + 1] += dens * whi[0]
        return cls(grid, bins, v, t)

    @property
    def density(self):
        return self.values / self.grid.volume

    def with_values(self, values, t=None):
        return GridMeasure(self.grid, self.bins, values, self.t if t is None else t)

    def __sub__(self, other):
        return self.with_values(self.values - other.values)


class Trajectory:
    """Measures at strictly increasing knots; evaluation is piecewise-constant-left."""

    def __init__(self, times, measures):
        times = np.asarray(times, dtype=float)
        if times.size != len(measures) or times.size == 0:
            raise ValueError("need one measure per knot")
        if np.any(np.diff(times) <= 0):
            raise ValueError("knots must be strictly increasing")
        kinds = {m.kind for m in measures}
        if len(kinds) != 1:
            raise ValueError("all measures must share a representation")
        self.times = times
        self.measures = list(measures)
        self.kind = kinds.pop()

    def index(self, t):
        k = int(np.searchsorted(self.times, t + 1e-12 * max(1.0, abs(t)), side="right")) - 1
        return max(k, 0)

    def at(self, t):
        return self.measures[self.index(t)]

    def __len__(self):
        return self.times.size

    def __iter__(self):
        return iter(zip(self.times, self.measures))

    @classmethod
    def constant(cls, measure, times):
        return cls(times, [measure] * len(times))

    def concat(self, other):
        """Append ``other``, dropping its first knot if it repeats our last one."""
        times, ms = list(other.times), list(other.measures)
        if times and math.isclose(times[0], self.times[-1], rel_tol=0, abs_tol=1e-12):
            times, ms = times[1:], ms[1:]
        return Trajectory(np.concatenate([self.times, times]), self.measures + ms)

    def sup_tv(self):
        return max(tv_norm(m) for m in self.measures)


# -- test functions --------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Product test function ``f(x, y) = fx(x) * fy(y)``.

    ``sup_x``, ``sup_grad`` and ``sup_y`` are exact suprema used for the B
    and D norms; ``in_d`` marks functions that vanish on the outflow face.
    """

    name: str
    fx: object
    fy: object
    sup_x: float
    sup_grad: float
    sup_y: float
    in_d: bool = True

    __test__ = False  # not a pytest class

    def __call__(self, x, y):
        x = np.atleast_2d(np.asarray(x, float))
        return self.fx(x) * self.fy(np.asarray(y, float))

    @property
    def norm_b(self):
        return self.sup_x * self.sup_y

    @property
    def norm_d(self):
        return (self.sup_x + self.sup_grad) * self.sup_y


def _yparts(y_cut):
    return [
        ("1", lambda y: np.ones_like(y), 1.0),
        (f"y<={y_cut:g}", lambda y: (y <= y_cut).astype(float), 1.0),
        ("y/(1+y)", lambda y: y / (1.0 + y), 1.0),
    ]


def dictionary(domain, y_cut=2.0):
    """Declared dictionary of smooth test functions vanishing on the outflow face."""
    L = domain.lengths[0]
    xparts = [
        ("cos(pi x/2L)", lambda x: np.cos(0.5 * np.pi * x[:, 0] / L), 1.0, 0.5 * np.pi / L),
        ("(1-x/L)^2", lambda x: (1.0 - x[:, 0] / L) ** 2, 1.0, 2.0 / L),
        ("sin(pi x/L)", lambda x: np.sin(np.pi * x[:, 0] / L), 1.0, np.pi / L),
        ("cos(3pi x/2L)", lambda x: np.cos(1.5 * np.pi * x[:, 0] / L), 1.0, 1.5 * np.pi / L),
    ]
    if domain.dim > 1:
        W = domain.lengths[1]
        xparts.append(("cos(pi x/2L)cos(pi x2/W)",
                       lambda x: np.cos(0.5 * np.pi * x[:, 0] / L) * np.cos(np.pi * x[:, 1] / W),
                       1.0, math.hypot(0.5 * np.pi / L, np.pi / W)))
    out = []
    for xn, fx, sx, gx in xparts:
        for yn, fy, sy in _yparts(y_cut):
            out.append(TestFunction(f"{xn}*[{yn}]", fx, fy, sx, gx, sy))
    return out


def moment_functionals(domain, monomer_mass=1.0):
    """Number, mass, first x-moment and monomer count (not in the D class)."""
    L = domain.lengths[0]
    cut = 1.5 * monomer_mass
    return [
        TestFunction("number", lambda x: np.ones(x.shape[0]), lambda y: np.ones_like(y),
                     1.0, 0.0, 1.0, False),
        TestFunction("mass", lambda x: np.ones(x.shape[0]), lambda y: y,
                     1.0, 0.0, math.inf, False),
        TestFunction("x_moment", lambda x: x[:, 0], lambda y: np.ones_like(y),
                     L, 1.0, 1.0, False),
        TestFunction("monomers", lambda x: np.ones(x.shape[0]),
                     lambda y: (y < cut).astype(float), 1.0, 0.0, 1.0, False),
    ]


def grid_values(f, grid, bins):
    """Test function evaluated on every (cell centre, pivot) node, ``(ncell, nb)``."""
    return np.outer(f.fx(grid.centers), f.fy(bins.pivots))


def pair(f, mu):
    """``<f, mu>``: sum of weight times ``f`` over atoms or cell-bin nodes."""
    if mu.kind == "ensemble":
        if mu.size == 0:
            return 0.0
        return float(np.sum(mu.weights * f(mu.positions, mu.types)))
    return float(np.sum(mu.values * grid_values(f, mu.grid, mu.bins)))


def tv_norm(mu):
    if mu.kind == "grid":
        return float(np.sum(np.abs(mu.values)))
    if mu.size == 0:
        return 0.0
    keys = np.column_stack([mu.positions, mu.types])
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    tot = np.zeros(inv.max() + 1)
    np.add.at(tot, inv.ravel(), mu.weights)
    return float(np.sum(np.abs(tot)))


def moi_norm(mu):
    """Largest per-cell type-space total variation per unit volume."""
    if mu.kind != "grid":
        raise RepresentationError("moi_norm needs a grid-form measure")
    if mu.values.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(mu.values), axis=1)) / mu.grid.volume)


def dstar_norm_surrogate(mu, funcs=None):
    """Lower bound on the D* norm from a fixed dictionary of test functions."""
    if funcs is None:
        dom = mu.grid.domain if mu.kind == "grid" else None
        if dom is None:
            from .flowfield import BoxDomain
            hi = mu.positions.max(axis=0) if mu.size else np.ones(1)
            dom = BoxDomain(np.maximum(hi * (1 + 1e-9), 1e-12))
        funcs = dictionary(dom)
    best = 0.0
    for f in funcs:
        if f.in_d:
            best = max(best, abs(pair(f, mu)) / f.norm_d)
    return best


def operator_norm_bound_H(mu, K_inf, C1):
    return 1.5 * K_inf * C1 * tv_norm(mu)


# -- conversions -----------------------------------------------------------

def ensemble_to_grid(ens, grid, bins):
    cells = grid.cell_index(ens.positions) if ens.size else np.zeros(0, np.int64)
    vals = bins.deposit(ens.types, ens.weights, grid.ncell, cells)
    return GridMeasure(grid, bins, vals, ens.t)


def grid_to_ensemble(gm, N, rng):
    """Stratified sample with weights ``1/N``; the expected count per cell-bin is exact."""
    v = gm.values
    if np.any(v < 0):
        raise RepresentationError("cannot sample a signed grid measure")
    expect = v * N
    base = np.floor(expect)
    counts = (base + (rng.random(v.shape) < expect - base)).astype(np.int64)
    cells, bins_ = np.nonzero(counts)
    reps = counts[cells, bins_]
    cell_rep = np.repeat(cells, reps)
    pos = gm.grid.centers[cell_rep] + (rng.random((cell_rep.size, gm.grid.dim)) - 0.5) * gm.grid.widths
    types = np.repeat(gm.bins.pivots[bins_], reps)
    return EnsembleMeasure(pos, types, np.full(types.size, 1.0 / N), gm.t)


# -- transport -------------------------------------------------------------

class GridTransport:
    """Transport and boundary inception on a :class:`CellGrid`.

    In one dimension the step is a conservative remap: cell edges are traced
    back and the new cell content is the old cumulative measure between the
    feet of its edges.  Edges whose backward path reaches the inflow face
    after ``s`` get their foot at the face, and their entry times drive the
    exact boundary deposit.  In higher dimension the step is a sub-point
    semi-Lagrangian pull-back with the Liouville factor.
    """

    def __init__(self, flow, grid, subpoints=2, deposit_subpoints=4, gauss_points=4):
        self.flow = flow
        self.grid = grid
        self.m = int(subpoints)
        self.m_dep = int(deposit_subpoints)
        self.gl_nodes, self.gl_weights = np.polynomial.legendre.leggauss(gauss_points)
        self._cache = {}
        self.identity = flow.no_outflow and flow.field.is_zero

    def _key(self, s, t):
        if self.flow.field.steady:
            return ("steady", round(t - s, 15))
        return (round(s, 15), round(t, 15))

    def _edge_trace(self, s, t):
        key = ("edges",) + self._key(s, t)
        hit = self._cache.get(key)
        if hit is None:
            e = self.grid.edges[0][:, None]
            r = self.flow.characteristics(t, s, e)
            bad = r.exited & (r.exit_class != INFLOW)
            if np.any(bad):
                raise FlowAssumptionViolation("backward edge trace left through a non-inflow face")
            foot = np.where(r.exited, 0.0, r.x[:, 0])
            entry = np.where(r.exited, r.exit_time, np.nan)
            if r.exited[0]:
                entry[0] = t  # the first edge lies on the inflow face
            # offsets from s so steady-field cache entries can be reused
            hit = (foot, entry - s)
            self._cache[key] = hit
        return hit

    def _sub_trace(self, s, t, m):
        key = ("sub", m) + self._key(s, t)
        hit = self._cache.get(key)
        if hit is None:
            pts = self.grid.subpoints(m).reshape(-1, self.grid.dim)
            r = self.flow.characteristics(t, s, pts, logj=True)
            bad = r.exited & (r.exit_class != INFLOW)
            if np.any(bad):
                raise FlowAssumptionViolation("backward trace left through a non-inflow face")
            hit = (r.x, r.exited, r.exit_time - s, r.logj)
            self._cache[key] = hit
        return hit

    def apply(self, values, s, t):
        """Transported cell-bin values and the per-bin outflow measure."""
        if self.identity or t == s:
            return values.copy(), np.zeros(values.shape[1])
        if self.grid.dim == 1:
            return self._remap_1d(values, s, t)
        return self._pullback(values, s, t)

    def _remap_1d(self, values, s, t):
        foot, _ = self._edge_trace(s, t)
        n = self.grid.ncell
        dx = self.grid.widths[0]
        cum = np.vstack([np.zeros((1, values.shape[1])), np.cumsum(values, axis=0)])
        r = foot / dx
        # feet within roundoff of a cell edge land on it, so shifts by whole cells are exact
        near = np.rint(r)
        r = np.where(np.abs(r - near) < 1e-9, near, r)
        k = np.clip(np.floor(r).astype(np.int64), 0, n - 1)
        frac = np.clip(r - k, 0.0, 1.0)
        F = cum[k] + frac[:, None] * values[k]
        new = np.diff(F, axis=0)
        outflow = cum[-1] - F[-1]
        return new, outflow

    def _pullback(self, values, s, t):
        g = self.grid
        foot, exited, _, logj = self._sub_trace(s, t, self.m)
        dens = g.interpolate(values / g.volume, foot) * np.exp(logj)[:, None]
        dens[exited] = 0.0
        new = dens.reshape(g.ncell, -1, values.shape[1]).mean(axis=1) * g.volume
        return new, values.sum(axis=0) - new.sum(axis=0)

    def boundary_deposit(self, inception, bins, s, t):
        """Measure added by boundary inception during ``(s, t]`` at its time-``t`` position."""
        out = np.zeros((self.grid.ncell, bins.nb))
        comps = [c for c in inception.boundary if not c.rate.is_zero]
        if not comps or t == s:
            return out
        if self.identity:
            raise FlowAssumptionViolation("boundary inception needs a non-zero inflow velocity")
        if self.grid.dim == 1:
            _, entry = self._edge_trace(s, t)
            r = np.where(np.isnan(entry), 0.0, entry) + s
            a, b = r[1:], r[:-1]  # cell i gets entries between its two edges
            half = 0.5 * (b - a)
            mid = 0.5 * (b + a)
            xi = np.zeros((1, 1))
            for comp in comps:
                acc = np.zeros(self.grid.ncell)
                for node, w in zip(self.gl_nodes, self.gl_weights):
                    tau = mid + half * node
                    acc += w * half * comp.rate(tau, np.repeat(xi, tau.size, axis=0))
                out += np.outer(acc, bins.deposit(np.asarray(comp.types.masses),
                                                  np.asarray(comp.types.probs)))
            return out
        g = self.grid
        xi, exited, etime, logj = self._sub_trace(s, t, self.m_dep)
        tau = etime + s
        un = np.zeros(xi.shape[0])
        if np.any(exited):
            un[exited] = -np.sum(g.domain.normal(xi[exited])
                                 * self.flow.field.evaluate(tau[exited], xi[exited]), axis=1)
        if np.any(un[exited] <= 0):
            raise FlowAssumptionViolation("u.n >= 0 at an inflow entry point")
        for comp in comps:
            dens = np.zeros(xi.shape[0])
            if np.any(exited):
                dens[exited] = (comp.rate(tau[exited], xi[exited]) / un[exited]
                                * np.exp(logj[exited]))
            cellmass = dens.reshape(g.ncell, -1).mean(axis=1) * g.volume
            out += np.outer(cellmass, bins.deposit(np.asarray(comp.types.masses),
                                                   np.asarray(comp.types.probs)))
        return out

    def matrix(self, s, t):
        """Cell-to-cell matrix of :meth:`apply`, which is linear in the values."""
        key = ("matrix",) + self._key(s, t)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.apply(np.eye(self.grid.ncell), s, t)[0]
            self._cache[key] = hit
        return hit

    def dual_apply(self, fvals, s, t, m=8, mode="adjoint"):
        """Function-side transport step on cell-node values.

        ``adjoint`` is the transpose of :meth:`apply`, so pairings match the
        measure side exactly.  ``characteristic`` is the cell average of
        ``f(Phi_{s,t}(z))`` over ``m`` sub-points, zero after exit, which
        differs from the transpose by the remap's numerical diffusion.
        """
        if self.identity or t == s:
            return fvals.copy()
        if mode == "adjoint":
            return self.matrix(s, t).T @ fvals
        if mode != "characteristic":
            raise ValueError(f"unknown dual transport mode {mode!r}")
        g = self.grid
        key = ("fwd", m) + self._key(s, t)
        hit = self._cache.get(key)
        if hit is None:
            pts = g.subpoints(m).reshape(-1, g.dim)
            r = self.flow.characteristics(s, t, pts)
            hit = (r.x, r.exited)
            self._cache[key] = hit
        pos, exited = hit
        vals = g.interpolate(fvals, pos)
        vals[exited] = 0.0
        return vals.reshape(g.ncell, -1, fvals.shape[1]).mean(axis=1)


def transport_pushforward(mu, s, t, flow, transport=None):
    """Push ``mu`` forward from ``s`` to ``t``; mass leaving X is dropped."""
    if t < s:
        raise ValueError("transport_pushforward needs s <= t")
    if mu.kind == "ensemble":
        if mu.size == 0:
            return mu.with_time(t)
        r = flow.characteristics(s, t, mu.positions)
        keep = ~r.exited
        return EnsembleMeasure(r.x[keep], mu.types[keep], mu.weights[keep], t)
    tr = transport or GridTransport(flow, mu.grid)
    new, _ = tr.apply(np.asarray(mu.values), s, t)
    return GridMeasure(mu.grid, mu.bins, new, t)


# -- coagulation -----------------------------------------------------------

class CoagOperator:
    """Binned coagulation generator for a fixed grid, pivots, kernel and weight ``h``."""

    def __init__(self, grid, bins, kernel, h, use_numba=None):
        self.grid, self.bins, self.kernel, self.h = grid, bins, kernel, h
        self.K = kernel.matrix(bins.pivots)
        self.gain_op = bins.gain_op(use_numba)
        if isinstance(h, CellDelocalisation):
            self.hcell = h.cell_index(grid.centers)
            # each grid cell must sit inside one delocalisation cell
            corners = grid.centers + 0.499 * grid.widths
            if np.any(h.cell_index(corners) != self.hcell):
                raise ValueError("grid cells must nest inside the delocalisation cells")
            self.hvol = h.volumes
            self.hmat = None
        else:
            self.hmat = h.matrix(grid.centers)

    def weights(self, mu_values):
        """``P[i] = sum_j h(x_i, x_j) mu_j`` and ``Q[i] = sum_j h(x_j, x_i) mu_j``."""
        if self.hmat is None:
            agg = np.zeros((self.hvol.size, mu_values.shape[1]))
            np.add.at(agg, self.hcell, mu_values)
            P = agg[self.hcell] / self.hvol[self.hcell][:, None]
            return P, P
        return self.hmat @ mu_values, self.hmat.T @ mu_values

    def rates(self, values, mu_values):
        """Gain measure and per-unit loss rate of ``H~[mu] c``."""
        P, Q = self.weights(mu_values)
        gain = self.gain_op.gain(values, P, self.K)
        loss_rate = 0.5 * (P + Q) @ self.K.T
        return gain, loss_rate

    def apply(self, values, mu_values):
        gain, loss_rate = self.rates(values, mu_values)
        return gain - values * loss_rate

    def dual_apply(self, fvals, mu_values):
        P, Q = self.weights(mu_values)
        return self.gain_op.dual_gain(fvals, P, self.K) - fvals * (0.5 * (P + Q) @ self.K.T)


def coag_generator_apply(c, mu, K, h):
    """Pre-dual coagulation generator ``H~[mu] c`` as a signed measure."""
    if c.kind == "grid":
        op = CoagOperator(c.grid, c.bins, K, h)
        return c.with_values(op.apply(np.asarray(c.values), np.asarray(mu.values)))
    n, m = c.size, mu.size
    if n == 0 or m == 0:
        return EnsembleMeasure.empty(c.positions.shape[1], c.t)
    xi = np.repeat(c.positions, m, axis=0)
    xj = np.tile(mu.positions, (n, 1))
    yi = np.repeat(c.types, m)
    yj = np.tile(mu.types, n)
    ww = np.repeat(c.weights, m) * np.tile(mu.weights, n)
    kv = np.atleast_1d(K.evaluate(yi, yj))
    hij = np.atleast_1d(h.evaluate(xi, xj))
    hji = np.atleast_1d(h.evaluate(xj, xi))
    gain_w = 0.5 * kv * hij * ww
    loss_w = -(0.5 * (hij + hji) * kv * ww).reshape(n, m).sum(axis=1)
    return EnsembleMeasure(np.vstack([xi, c.positions]), np.concatenate([yi + yj, c.types]),
                           np.concatenate([gain_w, loss_w]), c.t)


# -- text format -----------------------------------------------------------

def write_measure(path, mu):
    """Column text format: ``#`` header lines, then one row per particle or cell-bin."""
    lines = ["# delocoag measure v1", f"# kind {mu.kind}", f"# t {mu.t!r}"]
    if mu.kind == "grid":
        g, b = mu.grid, mu.bins
        lines += ["# grid_shape " + " ".join(map(str, g.shape)),
                  "# grid_lengths " + " ".join(repr(float(v)) for v in g.domain.lengths),
                  "# pivots " + " ".join(repr(float(v)) for v in b.pivots)]
        xcols = " ".join(f"x{k + 1}" for k in range(g.dim))
        lines.append(f"# columns cell {xcols} bin_lo bin_hi pivot mass")
        ii, aa = np.nonzero(mu.values)
        rows = np.column_stack([ii, g.centers[ii], b.lo_edges[aa], b.hi_edges[aa],
                                b.pivots[aa], mu.values[ii, aa]])
        fmt = ["%d"] + ["%.17g"] * (rows.shape[1] - 1)
    else:
        d = mu.positions.shape[1]
        lines.append("# dim " + str(d))
        lines.append("# columns " + " ".join(f"x{k + 1}" for k in range(d)) + " mass weight")
        rows = np.column_stack([mu.positions, mu.types, mu.weights])
        fmt = ["%.17g"] * rows.shape[1]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        if rows.size:
            np.savetxt(fh, rows, fmt=fmt)


def read_measure(path):
    header = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            parts = line[1:].split()
            if len(parts) >= 2:
                header[parts[0]] = parts[1:]
    data = np.loadtxt(path, comments="#", ndmin=2)
    t = float(header["t"][0])
    if header["kind"][0] == "grid":
        from .flowfield import BoxDomain
        dom = BoxDomain([float(v) for v in header["grid_lengths"]])
        grid = CellGrid(dom, [int(v) for v in header["grid_shape"]])
        bins = TypeBins([float(v) for v in header["pivots"]])
        vals = np.zeros((grid.ncell, bins.nb))
        if data.size:
            piv_idx = np.searchsorted(bins.pivots, data[:, -2])
            vals[data[:, 0].astype(int), piv_idx] = data[:, -1]
        return GridMeasure(grid, bins, vals, t)
    d = int(header["dim"][0])
    if data.size == 0:
        return EnsembleMeasure.empty(d, t)
    return EnsembleMeasure(data[:, :d], data[:, d], data[:, d + 1], t)
