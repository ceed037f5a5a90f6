"""Compiled versus fallback timings for the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case is run once untimed first so compilation stays out of the numbers.
"""
import argparse
import json
import time

import numpy as np

from delocoag.det_solver import PropagatorSchedule, direct_solve
from delocoag.flowfield import AffineField, BoxDomain, FlowMap
from delocoag.kernels.coag_bins import BinGain
from delocoag.measures import CellGrid, EnsembleMeasure, GridMeasure, TypeBins
from delocoag.stoch_solver import StochasticSetup, simulate
from delocoag.typespace import (CellDelocalisation, InceptionComponent, InceptionModel,
                                PointMixture, RateProfile, capped_product_kernel)

DOM = BoxDomain([1.0])
BINS = TypeBins.geometric(1.0, 64.0)
KERNEL = capped_product_kernel(0.5, 4.0)
INFLOW = InceptionModel(boundary=[InceptionComponent(RateProfile(1.0), PointMixture.single(1.0))],
                        flux_bound=1.0)


def case_gain(fast):
    rng = np.random.default_rng(0)
    G, P = rng.random((256, BINS.nb)), rng.random((256, BINS.nb))
    K = np.ones((BINS.nb, BINS.nb))
    op = BinGain(BINS.merge_lo, BINS.merge_wlo, BINS.merge_whi, use_numba=fast)
    return lambda: [op.gain(G, P, K) for _ in range(20)]


def case_march(fast):
    flow = FlowMap(AffineField([1.0], [[1.0]]), DOM, use_numba=fast)
    x = np.random.default_rng(1).random((20000, 1))
    return lambda: flow.characteristics(0.0, 0.3, x)


def case_particles(fast):
    flow = FlowMap(AffineField([0.0], [[0.0]]), DOM, no_outflow=True)
    st = StochasticSetup(flow, KERNEL, CellDelocalisation(DOM, 16), InceptionModel(), 0.05)
    N = 20000
    c0 = EnsembleMeasure(np.random.default_rng(2).random((N, 1)), np.ones(N), 1.0 / N)
    return lambda: simulate(c0, 0.2, N, 0, st, knots=[0.2], use_numba=fast)


def case_det_solve(fast):
    flow = FlowMap(AffineField([1.0], [[0.0]]), DOM, use_numba=fast)
    grid = CellGrid(DOM, [128])
    sched = PropagatorSchedule(1 / 128, flow, grid, BINS, KERNEL, CellDelocalisation(DOM, 16),
                               use_numba=fast)
    c0 = GridMeasure.zeros(grid, BINS)
    return lambda: direct_solve(c0, 0.5, sched, INFLOW)


CASES = {"bin gain (256 cells x 20)": case_gain, "characteristics (20k points)": case_march,
         "particle coagulation (N=20k)": case_particles, "det solve (128 cells, T=0.5)":
         case_det_solve}


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    rows = []
    print(f"{'case':32s} {'numba [s]':>11s} {'fallback [s]':>13s} {'speedup':>8s}")
    for name, make in CASES.items():
        fast = best_of(make(True), args.repeat)
        slow = best_of(make(False), args.repeat)
        rows.append({"case": name, "numba": fast, "fallback": slow, "speedup": slow / fast})
        print(f"{name:32s} {fast:11.4f} {slow:13.4f} {slow / fast:8.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
