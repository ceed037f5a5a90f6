import json
import math

import numpy as np
import pytest

from conftest import grid
from delocoag.errors import NotApplicable, RepresentationError
from delocoag.flowfield import AffineField, BoxDomain, ConstantField, FlowMap
from delocoag.measures import EnsembleMeasure, GridMeasure, Trajectory, TypeBins
from delocoag.verify import (PropertyReport, check_1d_derivative, check_boundary_condition,
                             check_flow_identities, check_global_bound, check_positivity,
                             check_stochastic_convergence, derivative_sup, flow_battery,
                             loglog_slope, psi_bound, smoluchowski_number, weak_errors,
                             write_reports)

DOM = BoxDomain([1.0])
BINS = TypeBins.geometric(1.0, 4.0)


def total_mass_traj(times, totals, n=4):
    g = grid(DOM, n)
    ms = []
    for t, tot in zip(times, totals):
        v = np.zeros((n, BINS.nb))
        v[:, 0] = tot / n
        ms.append(GridMeasure(g, BINS, v, t))
    return Trajectory(times, ms)


def test_grid_only_checks_reject_ensembles():
    traj = Trajectory([0.0], [EnsembleMeasure([[0.1]], [1.0], [1.0])])
    with pytest.raises(RepresentationError):
        check_positivity(traj)


def test_derivative_check_is_one_dimensional():
    dom = BoxDomain([1.0, 1.0])
    g = grid(dom, 2)
    traj = Trajectory([0.0], [GridMeasure.zeros(g, BINS)])
    with pytest.raises(NotApplicable):
        derivative_sup(traj)


def test_global_bound_example():
    # |c0| = 1, t0 = 1, sup I = 3: bound is 1 + 3t before t0 and 3 after
    times = [0.0, 0.5, 1.0, 2.0]
    ok = check_global_bound(total_mass_traj(times, [1.0, 2.5, 4.0, 3.0]), 1.0, 3.0, 1.0)
    assert ok.passed and ok.measured == pytest.approx(0.0, abs=1e-12)
    bad = check_global_bound(total_mass_traj(times, [1.0, 2.5, 4.0, 3.1]), 1.0, 3.0, 1.0)
    assert not bad.passed and bad.details["worst_time"] == 2.0
    assert bad.measured == pytest.approx(0.1)


def test_positivity_flags_negative_entries():
    traj = total_mass_traj([0.0, 1.0], [1.0, -1e-6])
    rep = check_positivity(traj)
    assert not rep.passed and rep.measured == pytest.approx(-2.5e-7)


def test_psi_bound_reduces_without_coagulation():
    assert psi_bound(0.5, 0.0, 1.0, 3.0, 1.0, 1.0, 1.0) == 2.5
    assert psi_bound(2.0, 0.0, 1.0, 3.0, 1.0, 1.0, 1.0) == 3.0
    k = 1.5 * 2.0
    assert psi_bound(0.5, 2.0, 1.0, 3.0, 1.0, 1.0, 1.0) == pytest.approx(
        math.exp(k * 0.5) * (1.0 + 2 * 3.0 / (3 * 2.0)))


def _profile_traj(n, fn):
    g = grid(DOM, n)
    v = np.zeros((n, BINS.nb))
    v[:, 0] = fn(g.centers[:, 0]) * g.volume
    return Trajectory([0.0], [GridMeasure(g, BINS, v)])


def test_derivative_check_separates_smooth_and_jump():
    smooth = check_1d_derivative(_profile_traj(64, np.sin), _profile_traj(128, np.sin))
    assert smooth.passed and smooth.measured == pytest.approx(1.0, abs=0.05)
    step = lambda x: (x > 0.3).astype(float)
    jump = check_1d_derivative(_profile_traj(64, step), _profile_traj(128, step))
    assert not jump.passed and jump.measured == pytest.approx(2.0)


def test_boundary_residual_uses_inflow_density():
    from conftest import boundary_model
    flow = FlowMap(ConstantField([2.0]), DOM)
    model = boundary_model(3.0)
    good = _profile_traj(32, lambda x: np.full_like(x, 1.5))
    good = Trajectory([0.0, 0.1], good.measures * 2)
    assert check_boundary_condition(good, model, flow).measured == pytest.approx(0.0, abs=1e-12)
    bad = Trajectory([0.0, 0.1], _profile_traj(32, lambda x: np.full_like(x, 1.0)).measures * 2)
    assert check_boundary_condition(bad, model, flow).measured == pytest.approx(1 / 3)


def test_stochastic_convergence_rates():
    Ns = [1e3, 1e4, 1e5]
    half = np.array([[n ** -0.5] * 3 for n in Ns])
    assert loglog_slope(Ns, half[:, 0]) == pytest.approx(-0.5)
    assert check_stochastic_convergence(Ns, half, list("abc")).passed
    slow = np.array([[n ** -0.2] * 3 for n in Ns])
    assert not check_stochastic_convergence(Ns, slow, list("abc")).passed
    bumpy = half.copy()
    bumpy[2, :2] = bumpy[1, :2] * 1.01
    rep = check_stochastic_convergence(Ns, bumpy, list("abc"))
    assert not rep.passed and rep.measured == 1.0


def test_weak_errors_oracle():
    vals = np.zeros((2, 2, 1))
    vals[:, 0, 0] = [1.0, 3.0]
    vals[:, 1, 0] = [2.0, 2.0]
    ref = np.array([[2.0], [1.0]])
    # knot 0: rms(-1, 1) = 1; knot 1: rms(1, 1) = 1; knot 0 with ref 1: rms(0, 2) = sqrt 2
    assert weak_errors(vals, ref)[0] == pytest.approx(1.0)
    assert weak_errors(vals, np.array([[1.0], [2.0]]))[0] == pytest.approx(math.sqrt(2))


def test_smoluchowski_oracle_matches_closed_form():
    n = smoluchowski_number([1.0, 4.0])
    for t, v in n.items():
        assert v == pytest.approx(2.0 / (2.0 + t), rel=1e-8)


def test_flow_identities_on_affine_field():
    flow = FlowMap(AffineField([1.0], [[1.0]]), DOM)
    rep = check_flow_identities(flow, flow_battery(flow, n=6))
    assert rep.passed and rep.measured < 1e-7


def test_report_json(tmp_path):
    reps = [PropertyReport("x", "s", np.float64(np.inf), 1, np.bool_(True), 0.0,
                           {"a": np.arange(2), "b": {1.5: np.int64(3)}, "c": np.nan})]
    assert reps[0].line().startswith("PASS x [s] measured=inf")
    write_reports(tmp_path / "r.json", reps)
    data = json.loads((tmp_path / "r.json").read_text())
    assert data[0]["passed"] is True and data[0]["details"]["a"] == [0, 1]
    assert data[0]["measured"] == "inf"


def test_stochastic_convergence_counts_only_eligible():
    Ns = [1e3, 1e4, 1e5]
    half = np.array([[n ** -0.5] * 3 for n in Ns])
    rep = check_stochastic_convergence(Ns, half, list("abc"), eligible=["a", "b"])
    assert not rep.passed and rep.details["counted"] == ["a", "b"]
