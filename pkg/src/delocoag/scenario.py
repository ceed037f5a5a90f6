"""Scenario files: TOML parsing, validation and construction of the model objects.

See ``docs/scenario_schema.md`` for the schema.  Every validation error is a
:class:`ConfigError` pointing at the offending line where it can be found.
"""
from __future__ import annotations

import hashlib
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, DelocoagError
from .flowfield import AffineField, BoxDomain, ConstantField, FlowMap, PolynomialField, shear_field
from .measures import CellGrid, GridMeasure, TypeBins
from .typespace import (KERNELS, CellDelocalisation, InceptionComponent, InceptionModel,
                        PointMixture, RateProfile, SmoothDelocalisation)

SCHEMA_VERSION = 1
ENV_PREFIX = "DELOCOAG_"

_TABLES = {"domain", "velocity", "kernel", "delocalisation", "inception", "initial",
           "numerics", "output"}
_REQUIRED = ("domain", "velocity", "kernel", "delocalisation", "numerics")


def _locate(text, table, key=None):
    """Line number of ``key`` inside ``[table]`` (or of the table header)."""
    current = None
    header = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[\[?\s*([\w.]+)\s*\]\]?", s)
        if m:
            current = m.group(1)
            if current == table and header is None:
                header = i
                if key is None:
                    return i
            continue
        if key is not None and current == table and re.match(rf"^{re.escape(key)}\s*=", s):
            return i
    return header


@dataclass
class Scenario:
    name: str
    raw: dict
    text: str
    domain: BoxDomain
    flow: FlowMap
    kernel: object
    h: object
    inception: InceptionModel
    grid: CellGrid
    bins: TypeBins
    initial: GridMeasure
    T: float
    dt: float
    numerics: dict
    knots: list = field(default_factory=list)

    @property
    def config_hash(self):
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    @property
    def seed(self):
        return int(self.numerics.get("seed", 0))

    def schedule(self, **overrides):
        from .det_solver import PropagatorSchedule
        kw = dict(splitting=self.numerics.get("splitting", "lie"),
                  coag_method=self.numerics.get("coag_method", "euler"),
                  coag_substeps=int(self.numerics.get("coag_substeps", 1)))
        kw.update(overrides)
        return PropagatorSchedule(self.dt, self.flow, self.grid, self.bins, self.kernel, self.h,
                                  **kw)

    def stochastic_setup(self):
        from .stoch_solver import StochasticSetup
        return StochasticSetup(self.flow, self.kernel, self.h, self.inception,
                               float(self.numerics.get("stoch_dt", self.dt)))

    @property
    def sup_I(self):
        return self.inception.sup_total(self.domain)


class _Builder:
    def __init__(self, text, data):
        self.text = text
        self.data = data

    def fail(self, msg, table, key=None):
        raise ConfigError(msg, _locate(self.text, table, key))

    def table(self, name, required=True):
        t = self.data.get(name)
        if t is None:
            if required:
                raise ConfigError(f"missing [{name}] table", None)
            return {}
        if not isinstance(t, dict):
            self.fail(f"{name} must be a table", name)
        return t

    def get(self, tbl, tname, key, kind, default=None, required=False):
        if key not in tbl:
            if required:
                self.fail(f"[{tname}] needs '{key}'", tname)
            return default
        v = tbl[key]
        try:
            if kind is float:
                if isinstance(v, bool):
                    raise TypeError
                v = float(v)
                if not math.isfinite(v):
                    raise ValueError
            elif kind is int:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise TypeError
            elif kind is str:
                if not isinstance(v, str):
                    raise TypeError
            elif kind is list:
                v = [float(a) for a in (v if isinstance(v, list) else [v])]
        except (TypeError, ValueError):
            self.fail(f"[{tname}] '{key}' has the wrong type or value", tname, key)
        return v

    # -- pieces -------------------------------------------------------------
    def domain(self):
        t = self.table("domain")
        L = self.get(t, "domain", "lengths", list, required=True)
        if not 1 <= len(L) <= 3 or min(L) <= 0:
            self.fail("domain lengths must be 1 to 3 positive numbers", "domain", "lengths")
        return BoxDomain(L)

    def velocity(self, dim):
        t = self.table("velocity")
        kind = self.get(t, "velocity", "kind", str, required=True)
        mod = dict(amplitude=self.get(t, "velocity", "amplitude", float, 0.0),
                   frequency=self.get(t, "velocity", "frequency", float, 0.0))
        if abs(mod["amplitude"]) >= 1:
            self.fail("velocity amplitude must be < 1 in magnitude", "velocity", "amplitude")
        if kind == "constant":
            v = self.get(t, "velocity", "value", list, required=True)
            if len(v) != dim:
                self.fail(f"velocity value needs {dim} components", "velocity", "value")
            return ConstantField(v, **mod)
        if kind == "affine":
            off = self.get(t, "velocity", "offset", list, required=True)
            mat = t.get("matrix")
            try:
                mat = np.asarray(mat, float).reshape(dim, dim)
            except (TypeError, ValueError):
                self.fail(f"velocity matrix must be {dim}x{dim}", "velocity", "matrix")
            if len(off) != dim:
                self.fail(f"velocity offset needs {dim} components", "velocity", "offset")
            return AffineField(off, mat, **mod)
        if kind == "shear":
            if dim < 2:
                self.fail("shear velocity needs dimension >= 2", "velocity", "kind")
            base = self.get(t, "velocity", "base", float, required=True)
            rate = self.get(t, "velocity", "rate", float, required=True)
            return shear_field(base, rate, **mod) if dim == 2 else self.fail(
                "shear velocity is two-dimensional", "velocity", "kind")
        if kind == "polynomial":
            if dim != 1:
                self.fail("polynomial velocity is one-dimensional", "velocity", "kind")
            return PolynomialField(self.get(t, "velocity", "coefficients", list, required=True),
                                   **mod)
        self.fail(f"unknown velocity kind {kind!r}", "velocity", "kind")

    def kernel(self):
        t = self.table("kernel")
        name = self.get(t, "kernel", "name", str, required=True)
        if name not in KERNELS:
            self.fail(f"unknown kernel {name!r}; known: {sorted(KERNELS)}", "kernel", "name")
        params = {k: self.get(t, "kernel", k, float) for k in t if k != "name"}
        try:
            return KERNELS[name](**params)
        except TypeError as exc:
            self.fail(f"bad kernel parameters: {exc}", "kernel")
        except DelocoagError as exc:
            self.fail(str(exc), "kernel")

    def delocalisation(self, domain):
        t = self.table("delocalisation")
        form = self.get(t, "delocalisation", "form", str, required=True)
        if form == "cells":
            cells = t.get("cells")
            try:
                cells = [int(c) for c in (cells if isinstance(cells, list) else [cells])]
                if min(cells) < 1 or len(cells) not in (1, domain.dim):
                    raise ValueError
            except (TypeError, ValueError):
                self.fail("cells must be positive integers", "delocalisation", "cells")
            return CellDelocalisation(domain, cells if len(cells) > 1 else cells[0])
        if form == "smooth":
            shape = self.get(t, "delocalisation", "shape", str, "constant")
            try:
                return SmoothDelocalisation(shape, self.get(t, "delocalisation", "amplitude",
                                                            float, 1.0),
                                            self.get(t, "delocalisation", "width", float))
            except DelocoagError as exc:
                self.fail(str(exc), "delocalisation")
        self.fail(f"unknown delocalisation form {form!r}", "delocalisation", "form")

    def _component(self, c, where, length):
        tname = f"inception.{where}"
        rate = RateProfile(self.get(c, tname, "rate", float, required=True),
                           self.get(c, tname, "amplitude", float, 0.0),
                           self.get(c, tname, "frequency", float, 0.0),
                           self.get(c, tname, "slope", float, 0.0), length)
        if rate.value < 0 or abs(rate.amplitude) > 1 or rate.slope < -1:
            self.fail("inception rate must stay nonnegative", tname)
        masses = self.get(c, tname, "masses", list, [1.0])
        probs = self.get(c, tname, "probs", list, [1.0 / len(masses)] * len(masses))
        try:
            mix = PointMixture(tuple(masses), tuple(probs))
        except DelocoagError as exc:
            self.fail(str(exc), tname)
        return InceptionComponent(rate, mix)

    def inception(self, domain, flow):
        t = self.table("inception", required=False)
        length = float(domain.lengths[0])
        comps = {}
        for where in ("boundary", "interior"):
            items = t.get(where, [])
            if isinstance(items, dict):
                items = [items]
            comps[where] = [self._component(c, where, length) for c in items]
        flux = t.get("flux_bound")
        if flux is None:
            # smallest I_* allowed by the declared rates and the inflow speed
            flux = 0.0
            if comps["boundary"]:
                xi, _ = domain.inflow_quadrature(8)
                un = -np.sum(domain.normal(xi) * flow.field.evaluate(0.0, xi), axis=1)
                lo = float(np.min(un)) / (1 + abs(flow.field.amplitude))
                sup = sum(c.rate.sup for c in comps["boundary"])
                flux = sup / lo if lo > 0 else math.inf
        return InceptionModel(comps["interior"], comps["boundary"], float(flux))

    def numerics(self, flow):
        t = self.table("numerics")
        out = dict(t)
        out["T"] = self.get(t, "numerics", "T", float, required=True)
        out["dt"] = self.get(t, "numerics", "dt", float, required=True)
        if out["T"] <= 0 or out["dt"] <= 0:
            self.fail("T and dt must be positive", "numerics", "dt")
        try:
            t0 = flow.residence_bound()
        except DelocoagError as exc:
            self.fail(f"velocity field rejected: {exc}", "velocity")
        if math.isfinite(t0) and out["dt"] > t0 / 10 * (1 + 1e-12):
            self.fail(f"dt={out['dt']:g} exceeds t0/10 = {t0 / 10:g}", "numerics", "dt")
        grid = t.get("grid")
        try:
            grid = [int(g) for g in (grid if isinstance(grid, list) else [grid])]
            if min(grid) < 2:
                raise ValueError
        except (TypeError, ValueError):
            self.fail("grid must be integers >= 2", "numerics", "grid")
        out["grid"] = grid
        for key in ("N", "R"):
            if key in t:
                self.get(t, "numerics", key, int)
        for key, default in (("bin_min", 1.0), ("bin_max", 64.0), ("bin_ratio", 2 ** 0.25)):
            out[key] = self.get(t, "numerics", key, float, default)
        if out["bin_min"] <= 0 or out["bin_max"] < out["bin_min"] or out["bin_ratio"] <= 1:
            self.fail("bins need 0 < bin_min <= bin_max and bin_ratio > 1", "numerics",
                      "bin_ratio")
        for key, allowed in (("splitting", ("lie", "strang")),
                             ("coag_method", ("euler", "exponential"))):
            if key in t and t[key] not in allowed:
                self.fail(f"{key} must be one of {allowed}", "numerics", key)
        return out

    def initial(self, grid, bins):
        t = self.table("initial", required=False)
        kind = self.get(t, "initial", "kind", str, "zero")
        if kind == "zero":
            return GridMeasure.zeros(grid, bins)
        mass = self.get(t, "initial", "mass", float, 1.0)
        dens = self.get(t, "initial", "density", float, 1.0)
        if dens < 0:
            self.fail("initial density must be nonnegative", "initial", "density")
        if kind == "uniform":
            return GridMeasure.from_density(grid, bins, lambda x: np.full(len(x), dens), mass)
        if kind == "step":
            cut = self.get(t, "initial", "cut", float, 0.5)
            return GridMeasure.from_density(grid, bins,
                                            lambda x: np.where(x[:, 0] < cut, dens, 0.0), mass)
        self.fail(f"unknown initial kind {kind!r}", "initial", "kind")


def parse_scenario(text, env=None):
    """Build a :class:`Scenario` from TOML text; ``env`` overrides come from ``DELOCOAG_*``."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax: {exc}", int(m.group(1)) if m else None) from None
    b = _Builder(text, data)
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}",
                          _locate_top(text, "schema_version"))
    for key, v in data.items():
        if isinstance(v, dict) and key not in _TABLES:
            b.fail(f"unknown table [{key}]", key)
    for name in _REQUIRED:
        if name not in data:
            raise ConfigError(f"missing [{name}] table", None)
    _apply_env(data, os.environ if env is None else env)

    domain = b.domain()
    vel = b.velocity(domain.dim)
    try:
        flow = FlowMap(vel, domain, no_outflow=bool(b.table("velocity").get("no_outflow", False)))
    except DelocoagError as exc:
        b.fail(f"velocity field rejected: {exc}", "velocity")
    kernel = b.kernel()
    h = b.delocalisation(domain)
    model = b.inception(domain, flow)
    num = b.numerics(flow)
    g = num["grid"]
    if len(g) not in (1, domain.dim):
        b.fail(f"grid needs {domain.dim} entries", "numerics", "grid")
    grid = CellGrid(domain, g if len(g) > 1 else g * domain.dim)
    extra = tuple(m for m in model.type_masses() if m < num["bin_min"])
    bins = TypeBins.geometric(num["bin_min"], num["bin_max"], num["bin_ratio"], extra=extra)
    c0 = b.initial(grid, bins)
    out = b.table("output", required=False)
    knots = out.get("knots")
    if knots is None:
        knots = list(np.linspace(0.0, num["T"], 7))
    knots = _check_knots(b, knots, num["T"])
    return Scenario(data.get("name", "unnamed"), data, text, domain, flow, kernel, h, model,
                    grid, bins, c0, num["T"], num["dt"], num, knots)


def _locate_top(text, key):
    for i, line in enumerate(text.splitlines(), start=1):
        if re.match(rf"^\s*{key}\s*=", line):
            return i
    return 1


def _check_knots(b, knots, T):
    try:
        ks = sorted(float(k) for k in knots)
    except (TypeError, ValueError):
        b.fail("knots must be numbers", "output", "knots")
    if ks and (ks[0] < 0 or ks[-1] > T + 1e-12):
        b.fail("knots must lie in [0, T]", "output", "knots")
    return ks


def parse_knots(s):
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _apply_env(data, env):
    num = data.setdefault("numerics", {})
    if ENV_PREFIX + "SEED" in env:
        num["seed"] = int(env[ENV_PREFIX + "SEED"])
    if ENV_PREFIX + "KNOTS" in env:
        data.setdefault("output", {})["knots"] = parse_knots(env[ENV_PREFIX + "KNOTS"])


def load_scenario(path, env=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from None
    return parse_scenario(text, env)
