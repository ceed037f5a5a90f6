import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import boundary_model, grid
from delocoag._accel import HAVE_NUMBA
from delocoag.det_solver import PropagatorSchedule, direct_solve
from delocoag.flowfield import AffineField, BoxDomain, FlowMap
from delocoag.kernels.coag_bins import BinGain
from delocoag.measures import GridMeasure, TypeBins
from delocoag.typespace import CellDelocalisation, capped_product_kernel

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")

BINS = TypeBins.geometric(1.0, 64.0)


def test_gain_paths_agree():
    rng = np.random.default_rng(0)
    nb = BINS.nb
    G, P = rng.random((5, nb)), rng.random((5, nb))
    K = rng.random((nb, nb))
    K = K + K.T
    args = (BINS.merge_lo, BINS.merge_wlo, BINS.merge_whi)
    fast, slow = BinGain(*args, use_numba=True), BinGain(*args, use_numba=False)
    np.testing.assert_allclose(fast.gain(G, P, K), slow.gain(G, P, K), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(fast.dual_gain(G, P, K), slow.dual_gain(G, P, K),
                               rtol=1e-12, atol=1e-15)


def _solve(use_numba):
    dom = BoxDomain([1.0])
    flow = FlowMap(AffineField([1.0], [[0.5]]), dom, use_numba=use_numba)
    sched = PropagatorSchedule(1 / 64, flow, grid(dom, 32), BINS, capped_product_kernel(0.5, 4.0),
                               CellDelocalisation(dom, 4), use_numba=use_numba)
    return direct_solve(GridMeasure.zeros(sched.grid, BINS), 0.75, sched, boundary_model(2.0))


def test_deterministic_solve_paths_agree():
    a, b = _solve(True), _solve(False)
    for ma, mb in zip(a.measures, b.measures):
        np.testing.assert_allclose(ma.values, mb.values, rtol=1e-10, atol=1e-14)


SCRIPT = """
import json, sys
sys.path.insert(0, {tests!r})
import delocoag._accel as acc
from test_fallback import _solve
traj = _solve(None)
print(json.dumps({{"use_numba": acc.USE_NUMBA, "final": traj.measures[-1].values.tolist()}}))
"""


def test_environment_switch_selects_fallback():
    env = dict(os.environ, DELOCOAG_DISABLE_NUMBA="1")
    code = SCRIPT.format(tests=os.path.dirname(__file__))
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout
    data = json.loads(out.splitlines()[-1])
    assert data["use_numba"] is False
    np.testing.assert_allclose(data["final"], _solve(True).measures[-1].values,
                               rtol=1e-10, atol=1e-14)
