"""Particle types, coagulation kernels, spatial delocalisation and inception models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from ._accel import njit
from .errors import CertificationError, FlowAssumptionViolation, ModelError

KERNEL_CONSTANT, KERNEL_CAPPED_PRODUCT, KERNEL_CAPPED_SUM = 0, 1, 2


def merge(y1, y2):
    """Type of the particle formed by merging ``y1`` and ``y2`` (scalar mass)."""
    return y1 + y2


@njit
def kernel_value(code, params, y1, y2):
    if code == 0:
        return params[0]
    if code == 1:
        return min(params[0] * (y1 * y2), params[1])
    return min(params[0] * (y1 + y2), params[1])


class Kernel:
    """A bounded symmetric coagulation kernel with declared bound ``bound``.

    ``code`` and ``params`` identify the formula inside compiled loops.
    """

    def __init__(self, name, code, params, bound):
        self.name = name
        self.code = int(code)
        self.params = np.asarray(params, dtype=float)
        self.bound = float(bound)
        if self.bound <= 0:
            raise ModelError("kernel bound must be positive")

    def evaluate(self, y1, y2):
        y1, y2 = np.broadcast_arrays(np.asarray(y1, float), np.asarray(y2, float))
        p = self.params
        if self.code == KERNEL_CONSTANT:
            out = np.full(y1.shape, p[0])
        elif self.code == KERNEL_CAPPED_PRODUCT:
            out = np.minimum(p[0] * (y1 * y2), p[1])
        else:
            out = np.minimum(p[0] * (y1 + y2), p[1])
        return out if out.ndim else float(out)

    __call__ = evaluate

    @property
    def is_zero(self):
        return self.code == KERNEL_CONSTANT and self.params[0] == 0.0

    def matrix(self, masses):
        m = np.asarray(masses, dtype=float)
        return self.evaluate(m[:, None], m[None, :])

    def __repr__(self):
        return f"Kernel({self.name}, params={self.params.tolist()}, bound={self.bound})"


def constant_kernel(value=1.0, bound=None):
    if bound is None:
        # K = 0 still needs a positive nominal bound
        bound = value if value > 0 else 1.0
    return Kernel("constant", KERNEL_CONSTANT, [value], bound)


def capped_product_kernel(scale=1.0, cap=10.0, bound=None):
    return Kernel("capped_product", KERNEL_CAPPED_PRODUCT, [scale, cap],
                  cap if bound is None else bound)


def capped_sum_kernel(scale=1.0, cap=10.0, bound=None):
    return Kernel("capped_sum", KERNEL_CAPPED_SUM, [scale, cap], cap if bound is None else bound)


KERNELS = {
    "constant": constant_kernel,
    "capped_product": capped_product_kernel,
    "capped_sum": capped_sum_kernel,
}


def kernel_bound_certify(K, samples, y_range=(1e-3, 1e3), seed=0):
    """Largest kernel value over a scrambled Sobol design of type pairs.

    Masses are spread log-uniformly over ``y_range``; the range corners are
    always included.  Raises :class:`CertificationError` if any value
    exceeds the declared bound.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    lo, hi = np.log(y_range[0]), np.log(y_range[1])
    pts = qmc.Sobol(d=2, scramble=True, seed=seed).random(samples)
    ys = np.exp(lo + (hi - lo) * pts)
    corners = np.exp(np.array([[lo, lo], [lo, hi], [hi, lo], [hi, hi]]))
    ys = np.concatenate([ys, corners])
    vals = np.atleast_1d(K.evaluate(ys[:, 0], ys[:, 1]))
    if np.any(vals < 0):
        raise CertificationError(f"{K.name} kernel is negative at a sampled pair")
    top = float(np.max(vals))
    if top > K.bound * (1 + 1e-12):
        raise CertificationError(f"{K.name} kernel reaches {top:g} > declared bound {K.bound:g}")
    return top


class CellDelocalisation:
    """Cell-indicator weight ``h(x1, x2) = 1{same cell} / vol(cell)``.

    Cells are an equal axis-aligned partition of a box domain.
    """

    form = "H2-cells"

    def __init__(self, domain, cells_per_axis):
        self.domain = domain
        self.shape = tuple(int(c) for c in np.broadcast_to(cells_per_axis, (domain.dim,)))
        self.widths = domain.lengths / np.array(self.shape)
        self.count = int(np.prod(self.shape))
        self.volumes = np.full(self.count, float(np.prod(self.widths)))
        self.C1 = 1.0 / float(np.min(self.volumes))

    @property
    def C2(self):
        # each 1D indicator factor has two jump atoms of size at most C1
        return 2.0 * self.C1

    def cell_index(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.floor(x / self.widths).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.shape) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def evaluate(self, x1, x2):
        x1 = np.atleast_2d(np.asarray(x1, float))
        x2 = np.atleast_2d(np.asarray(x2, float))
        c1, c2 = self.cell_index(x1), self.cell_index(x2)
        out = np.where(c1 == c2, 1.0 / self.volumes[c1], 0.0)
        return out if out.size > 1 else float(out[0])

    def c2_check(self):
        """Atom count times the largest indicator value, 1D axis-aligned partitions only."""
        if self.domain.dim != 1:
            return math.nan
        return 2.0 * self.C1


class SmoothDelocalisation:
    """Smooth weight: ``constant`` (``h = a``) or ``gaussian`` in ``|x1 - x2|``."""

    form = "H3-smooth"

    def __init__(self, shape="constant", amplitude=1.0, width=None):
        if shape not in ("constant", "gaussian"):
            raise ModelError(f"unknown smooth delocalisation {shape!r}")
        if shape == "gaussian" and not width:
            raise ModelError("gaussian delocalisation needs a positive width")
        self.shape = shape
        self.amplitude = float(amplitude)
        self.width = None if width is None else float(width)
        self.C1 = self.amplitude
        self.C2 = 0.0 if shape == "constant" else self.amplitude / (self.width * math.sqrt(math.e))

    def evaluate(self, x1, x2):
        x1 = np.atleast_2d(np.asarray(x1, float))
        x2 = np.atleast_2d(np.asarray(x2, float))
        if self.shape == "constant":
            out = np.full(max(x1.shape[0], x2.shape[0]), self.amplitude)
        else:
            r2 = np.sum((x1 - x2) ** 2, axis=1)
            out = self.amplitude * np.exp(-0.5 * r2 / self.width**2)
        return out if out.size > 1 else float(out[0])

    def matrix(self, points):
        p = np.asarray(points, float)
        if self.shape == "constant":
            return np.full((p.shape[0], p.shape[0]), self.amplitude)
        r2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=2)
        return self.amplitude * np.exp(-0.5 * r2 / self.width**2)


def h_evaluate(h, x1, x2):
    return h.evaluate(x1, x2)


@dataclass(frozen=True)
class PointMixture:
    """Finite mixture of point masses in type space."""

    masses: tuple
    probs: tuple

    def __post_init__(self):
        m = np.asarray(self.masses, float)
        p = np.asarray(self.probs, float)
        if m.shape != p.shape or m.size == 0:
            raise ModelError("mixture masses and probabilities must match")
        if np.any(m <= 0) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-9):
            raise ModelError("mixture needs positive masses and probabilities summing to 1")

    @classmethod
    def single(cls, mass):
        return cls((float(mass),), (1.0,))

    def sample(self, rng, n):
        return np.asarray(self.masses)[rng.choice(len(self.masses), size=n, p=self.probs)]


@dataclass(frozen=True)
class RateProfile:
    """Rate ``value * (1 + A sin(w t)) * (1 + slope * x_1 / L)``."""

    value: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0
    slope: float = 0.0
    length: float = 1.0

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, float))
        tf = 1.0 + self.amplitude * np.sin(self.frequency * np.asarray(t, float))
        return self.value * tf * (1.0 + self.slope * x[:, 0] / self.length)

    @property
    def sup(self):
        return abs(self.value) * (1 + abs(self.amplitude)) * (1 + max(self.slope, 0.0))

    @property
    def is_zero(self):
        return self.value == 0.0


@dataclass(frozen=True)
class InceptionComponent:
    rate: RateProfile
    types: PointMixture


@dataclass
class InceptionModel:
    """Interior intensity density and inflow-boundary flux intensity.

    Each side is a list of (rate profile, type mixture) components.  The
    boundary rate is per unit inflow surface.  ``flux_bound`` is the
    declared ``I_*`` with ``|I_bdry| <= I_* |u.n|`` on the inflow face.
    """

    interior: list = field(default_factory=list)
    boundary: list = field(default_factory=list)
    flux_bound: float = math.inf

    @property
    def is_zero(self):
        return all(c.rate.is_zero for c in self.interior + self.boundary)

    def interior_density(self, t, x):
        x = np.atleast_2d(x)
        return sum((c.rate(t, x) for c in self.interior), np.zeros(x.shape[0]))

    def boundary_density(self, t, xi):
        xi = np.atleast_2d(xi)
        return sum((c.rate(t, xi) for c in self.boundary), np.zeros(xi.shape[0]))

    def type_masses(self):
        ms = set()
        for c in self.interior + self.boundary:
            ms.update(float(m) for m in c.types.masses)
        return sorted(ms)

    def sup_total(self, domain):
        """Upper bound on total intensity over time, from the rate profiles."""
        vol, area = domain.volume, domain.inflow_area
        return (sum(c.rate.sup for c in self.interior) * vol
                + sum(c.rate.sup for c in self.boundary) * area)

    def flags(self):
        """Compliance with the three inception hypotheses.

        The built-in profiles are bounded, continuous in time and smooth in
        space, so all three hold whenever the flux bound is finite.
        """
        finite = math.isfinite(self.flux_bound)
        return {"I1": True, "I2": finite, "I3": finite}


def inception_totals(model, t, domain, n_per_axis=64):
    """Total interior and boundary intensity at time ``t`` by midpoint quadrature."""
    axes = [(np.arange(n_per_axis) + 0.5) * L / n_per_axis for L in domain.lengths]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    dens = model.interior_density(t, pts)
    bnodes, bw = domain.inflow_quadrature(n_per_axis)
    flux = model.boundary_density(t, bnodes)
    if np.any(dens < 0) or np.any(flux < 0):
        raise ModelError(f"negative inception intensity at t={t}")
    return float(np.mean(dens) * domain.volume), float(np.sum(flux * bw))


def check_flux_bound(model, flow, horizon, samples=1000, seed=0, eps=1e-12):
    """Largest ratio ``|I_bdry| / (I_* |u.n|)`` over sampled inflow points and times."""
    rng = np.random.default_rng(seed)
    ts = rng.random(samples) * horizon
    xi = flow.domain.sample_inflow(rng, samples)
    flux = model.boundary_density(ts, xi)
    un = -np.sum(flow.domain.normal(xi) * flow.field.evaluate(ts, xi), axis=1)
    if np.any((un <= 0) & (flux > 0)):
        raise FlowAssumptionViolation("inflow face has u.n >= 0 where inception is active")
    ok = flux <= model.flux_bound * un + eps
    return bool(np.all(ok)), float(np.max(flux - model.flux_bound * un))
