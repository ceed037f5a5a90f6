import numpy as np
import pytest

from conftest import boundary_model, grid
from delocoag.errors import ScaleError
from delocoag.flowfield import BoxDomain, ConstantField, FlowMap
from delocoag.measures import (EnsembleMeasure, GridMeasure, TypeBins, moment_functionals, pair,
                               tv_norm)
from delocoag.stoch_solver import (ParticleSystem, StochasticSetup, empirical_measure,
                                   majorant_rates, replica_moments, replica_rng, run_replicas,
                                   simulate)
from delocoag.typespace import (CellDelocalisation, InceptionModel, SmoothDelocalisation,
                                capped_product_kernel, constant_kernel)

DOM = BoxDomain([1.0])
FUNCS = moment_functionals(DOM)
NUMBER, MASS = FUNCS[0], FUNCS[1]


def setup(K=None, h=None, model=None, flow=None, dt=1 / 64):
    return StochasticSetup(flow or FlowMap(ConstantField([1.0]), DOM), K or constant_kernel(1.0),
                           h or CellDelocalisation(DOM, 8), model or InceptionModel(), dt)


def test_majorant_rate_examples():
    assert majorant_rates([2], [1.0], 1.0, 1)[0] == 1.0
    with pytest.raises(ScaleError):
        majorant_rates([2**27], [1.0], 1.0, 1)


def test_boundary_poisson_rate_scales_with_N():
    # K = 0 and no exits before T = 0.5: particle count is the Poisson insertion count
    st = setup(K=constant_kernel(0.0), model=boundary_model(3.0))
    c0 = EnsembleMeasure.empty(1)
    counts = [simulate(c0, 0.5, 10, 7, st, replica=r)[1].count for r in range(400)]
    assert np.mean(counts) == pytest.approx(30 * 0.5, rel=0.05)


def test_no_events_keeps_count():
    st = setup(K=constant_kernel(0.0))
    c0 = EnsembleMeasure(np.linspace(0.0, 0.4, 20)[:, None], np.ones(20), 0.05)
    traj, sys_ = simulate(c0, 0.5, 20, 1, st)
    assert all(m.size == 20 for m in traj.measures)
    assert sys_.exits.arrays()[0].size == 0


def test_empirical_measure_examples(rng):
    def total(N, n):
        s = ParticleSystem(np.zeros((n, 1)), np.ones(n), N, 0.0, rng, 1)
        return pair(NUMBER, empirical_measure(s))

    assert total(4, 4) == 1.0
    assert total(2, 3) == 1.5
    assert total(3, 0) == 0.0


def test_coagulation_conserves_mass_and_counts_events():
    st = setup(K=capped_product_kernel(1.0, 4.0), h=CellDelocalisation(DOM, 2),
               flow=FlowMap(ConstantField([0.0]), DOM))
    N = 500
    c0 = EnsembleMeasure(np.random.default_rng(0).random((N, 1)), np.ones(N), 1.0 / N)
    traj, sys_ = simulate(c0, 0.5, N, 3, st)
    mass = [pair(MASS, m) for m in traj.measures]
    np.testing.assert_allclose(mass, 1.0, rtol=1e-12)
    lost = pair(NUMBER, traj.measures[0]) - pair(NUMBER, traj.measures[-1])
    assert lost == pytest.approx(sys_.stats[1] / N, abs=1e-12)
    assert sys_.stats[1] > 0


def test_acceptance_fraction_matches_mean_kernel():
    st = setup(K=capped_product_kernel(0.25, 4.0), h=CellDelocalisation(DOM, 1),
               flow=FlowMap(ConstantField([0.0]), DOM))
    N = 2000
    y = np.random.default_rng(1).integers(1, 6, N).astype(float)
    c0 = EnsembleMeasure(np.full((N, 1), 0.5), y, 1.0 / N)
    _, sys_ = simulate(c0, 0.3, N, 5, st)
    props, acc, ksum = sys_.stats
    p = ksum / props
    assert acc / props == pytest.approx(p, abs=4 * np.sqrt(p * (1 - p) / props))


def test_outflow_count_balance():
    st = setup(K=constant_kernel(0.0), model=boundary_model(2.0))
    c0 = EnsembleMeasure(np.random.default_rng(2).random((100, 1)), np.ones(100), 0.01)
    _, sys_ = simulate(c0, 1.5, 100, 11, st)
    exits = sys_.exits.arrays()[0].size
    assert sys_.count == 100 + sys_.inserted - exits
    # exit times of the initial particles follow the characteristics x + t = 1
    t, x, _ = sys_.exits.arrays()
    np.testing.assert_allclose(x[:, 0], 1.0, atol=1e-7)


def test_replicas_reproducible_and_order_independent():
    st = setup(model=boundary_model(1.0))
    c0 = EnsembleMeasure.empty(1)
    r1 = run_replicas(c0, 0.5, 200, 3, 42, st, [0.25, 0.5], workers=1)
    r2 = run_replicas(c0, 0.5, 200, 3, 42, st, [0.25, 0.5], workers=2)
    for (s1, st1, _), (s2, st2, _) in zip(r1, r2):
        for (p1, y1), (p2, y2) in zip(s1, s2):
            np.testing.assert_array_equal(p1, p2)
            np.testing.assert_array_equal(y1, y2)
    assert not np.array_equal(r1[0][0][-1][1], r1[1][0][-1][1])


def test_replica_rng_streams_differ():
    a = replica_rng(9, 0).random(4)
    np.testing.assert_array_equal(a, replica_rng(9, 0).random(4))
    assert not np.array_equal(a, replica_rng(9, 1).random(4))


def test_deterministic_replicas_have_zero_stderr():
    st = setup(K=constant_kernel(0.0))
    c0 = EnsembleMeasure(np.full((10, 1), 0.1), np.ones(10), 0.1)
    _, err, _ = replica_moments(c0, 0.4, 10, 4, 0, st, [0.2, 0.4], FUNCS)
    assert np.all(err == 0.0)
    with pytest.raises(ValueError):
        replica_moments(c0, 0.4, 10, 1, 0, st, [0.4], FUNCS)


def test_stratified_start_is_exact(bins):
    g = grid(DOM, 8)
    v = np.zeros((8, bins.nb))
    v[:, 0] = 0.125  # 0.125 * N is a whole number of particles
    c0 = GridMeasure(g, bins, v)
    st = setup(K=constant_kernel(0.0))
    mean, _, _ = replica_moments(c0, 0.1, 80, 3, 0, st, [0.0], FUNCS)
    assert mean[0, 0] == pytest.approx(tv_norm(c0), abs=1e-12)


def test_stderr_scales_with_replicas():
    st = setup(model=boundary_model(1.0), h=SmoothDelocalisation())
    c0 = EnsembleMeasure.empty(1)
    _, e16, _ = replica_moments(c0, 0.5, 100, 16, 5, st, [0.5], FUNCS)
    _, e64, _ = replica_moments(c0, 0.5, 100, 64, 6, st, [0.5], FUNCS)
    assert e16[0, 0] / e64[0, 0] == pytest.approx(2.0, rel=0.3)


def test_gaussian_weight_thinning():
    h = SmoothDelocalisation("gaussian", 1.0, 0.05)
    st = setup(h=h, flow=FlowMap(ConstantField([0.0]), DOM))
    N = 400
    c0 = EnsembleMeasure(np.random.default_rng(3).random((N, 1)), np.ones(N), 1.0 / N)
    _, sys_ = simulate(c0, 0.5, N, 8, st)
    # distant pairs are mostly rejected
    assert 0 < sys_.stats[1] < 0.3 * sys_.stats[0]


def test_negative_initial_data_rejected():
    with pytest.raises(ValueError):
        simulate(EnsembleMeasure([[0.5]], [1.0], [-1.0]), 0.1, 10, 0, setup())


def test_snapshots_are_independent_of_later_steps():
    st = setup(flow=FlowMap(ConstantField([0.0]), DOM), h=CellDelocalisation(DOM, 1))
    N = 200
    c0 = EnsembleMeasure(np.full((N, 1), 0.5), np.ones(N), 1.0 / N)
    traj, _ = simulate(c0, 0.5, N, 4, st)
    for m in traj.measures:
        assert pair(MASS, m) == pytest.approx(1.0, abs=1e-12)


def test_means_match_deterministic_solution(bins):
    from delocoag.det_solver import PropagatorSchedule, direct_solve

    flow = FlowMap(ConstantField([1.0]), DOM)
    h = CellDelocalisation(DOM, 4)
    K = capped_product_kernel(0.5, 8.0)
    model = boundary_model(2.0)
    sched = PropagatorSchedule(1 / 256, flow, grid(DOM, 256), bins, K, h, coag_substeps=4)
    det = direct_solve(GridMeasure.zeros(sched.grid, bins), 1.2, sched, model)
    st = StochasticSetup(flow, K, h, model, 1 / 64)
    knots = [0.6, 1.2]
    mean, err, _ = replica_moments(EnsembleMeasure.empty(1), 1.2, 2000, 16, 17, st, knots, FUNCS)
    for k, t in enumerate(knots):
        ref = np.array([pair(f, det.at(t)) for f in FUNCS])
        # agreement within sampling error plus a small discretisation allowance
        assert np.all(np.abs(mean[k] - ref) <= 4 * err[k] + 0.02 * np.abs(ref) + 1e-3)


@pytest.mark.parametrize("kernel", [constant_kernel(1.0), capped_product_kernel(0.5, 3.0)])
def test_compiled_and_python_substeps_agree(kernel):
    st = setup(K=kernel, h=SmoothDelocalisation("gaussian", 1.0, 0.2),
               model=boundary_model(1.0))
    c0 = EnsembleMeasure(np.random.default_rng(5).random((300, 1)), np.ones(300), 1.0 / 300)
    a = simulate(c0, 0.5, 300, 21, st, use_numba=True)[1]
    b = simulate(c0, 0.5, 300, 21, st, use_numba=False)[1]
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.pos, b.pos)
    np.testing.assert_array_equal(a.stats, b.stats)
