import numpy as np
import pytest

from delocoag.flowfield import AffineField, BoxDomain, ConstantField, FlowMap
from delocoag.measures import CellGrid, TypeBins
from delocoag.typespace import InceptionComponent, InceptionModel, PointMixture, RateProfile


@pytest.fixture(scope="session")
def unit():
    return BoxDomain([1.0])


@pytest.fixture(scope="session")
def plug(unit):
    return FlowMap(ConstantField([1.0]), unit)


@pytest.fixture(scope="session")
def linear(unit):
    # u(x) = 1 + x
    return FlowMap(AffineField([1.0], [[1.0]]), unit)


@pytest.fixture(scope="session")
def bins():
    return TypeBins.geometric(1.0, 64.0)


def boundary_model(rate=1.0, mass=1.0):
    comp = InceptionComponent(RateProfile(rate), PointMixture.single(mass))
    return InceptionModel(boundary=[comp], flux_bound=rate)


def grid(domain, n):
    return CellGrid(domain, [n] * domain.dim)


def rel(a, b):
    return abs(a - b) / abs(b)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[key])
