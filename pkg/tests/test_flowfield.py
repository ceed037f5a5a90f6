import math
import pickle

import numpy as np
import pytest

from delocoag.errors import FieldEvaluationError, FlowAssumptionViolation, IntegrationBudgetError
from delocoag.flowfield import (INFLOW, OUTFLOW, SIDE, AffineField, BoxDomain, ConstantField,
                                ExitRecord, FlowMap, PolynomialField, VelocityField, shear_field)


def test_residence_bound_examples(plug, linear, unit):
    assert plug.residence_bound() == pytest.approx(1.1, abs=1e-8)
    assert linear.residence_bound() == pytest.approx(math.log(2) * 1.1, abs=1e-6)
    assert FlowMap(ConstantField([2.0]), unit).residence_bound() == pytest.approx(0.55, abs=1e-8)


def test_advect_constant(plug):
    np.testing.assert_allclose(plug.advect(0, 0.3, 0.5), [0.8], atol=1e-12)


def test_advect_exit_record(plug):
    rec = plug.advect(0, 0.8, 0.5)
    assert isinstance(rec, ExitRecord)
    assert rec.time == pytest.approx(0.5, abs=1e-7)
    np.testing.assert_allclose(rec.position, [1.0], atol=1e-7)
    assert rec.boundary == "outflow"


@pytest.mark.parametrize("t,x", [(0.2, 0.1), (0.5, 0.0), (0.6, 0.2)])
def test_advect_linear_matches_analytic(linear, t, x):
    want = (x + 1) * math.exp(t) - 1
    if want < 1:
        assert linear.advect(0, t, x)[0] == pytest.approx(want, abs=1e-9)


def test_backward_advect(plug):
    np.testing.assert_allclose(plug.advect(0.5, 0.3, 0.6), [0.4], atol=1e-12)


def test_identity_at_equal_times(linear):
    np.testing.assert_array_equal(linear.advect(0.4, 0.4, [0.3]), [0.3])
    assert linear.liouville_weight(0.4, 0.4, 0.3) == 1.0
    np.testing.assert_array_equal(linear.flow_gradient(0.4, 0.4, 0.3), [[1.0]])


def test_liouville(plug, linear):
    assert plug.liouville_weight(0, 0.7, 0.1) == 1.0
    assert linear.liouville_weight(0, 1, 0.0) == pytest.approx(math.e, rel=1e-9)


def test_flow_gradient(plug, linear):
    np.testing.assert_allclose(plug.flow_gradient(0, 0.5, 0.2), [[1.0]])
    assert linear.flow_gradient(0, 1, 0.0)[0, 0] == pytest.approx(math.e, rel=1e-9)


def test_entry_data_examples(plug, linear):
    e = plug.entry_data(2, 0.4)
    assert e.time == pytest.approx(1.6, abs=1e-7)
    np.testing.assert_allclose(e.position, [0.0], atol=1e-7)
    assert e.entered_through == "inflow"
    e = plug.entry_data(0.3, 0.5)
    assert (e.time, e.entered_through) == (0.0, "initial")
    np.testing.assert_allclose(e.position, [0.2], atol=1e-12)
    e = linear.entry_data(5, 0.5)
    assert e.time == pytest.approx(5 - math.log(1.5), abs=1e-7)


def test_entry_then_forward_returns(linear):
    e = linear.entry_data(3.0, 0.7)
    back = linear.advect(e.time, 3.0, e.position)
    np.testing.assert_allclose(back, [0.7], atol=1e-7)


def test_entry_data_is_cached(plug):
    assert plug.entry_data(2.0, 0.4) is plug.entry_data(2.0, 0.4)


def test_backward_exit_through_outflow_is_rejected(unit):
    # u = -1 carries everything out through x = 0 forward, so backward paths hit x = 1
    flow = FlowMap(ConstantField([-1.0]), unit, no_outflow=True)
    with pytest.raises(FlowAssumptionViolation):
        flow.entry_data(2.0, 0.5)


class _Broken(VelocityField):
    dim = 1

    def _u(self, x):
        return np.full(x.shape, np.nan)

    def _shape_bounds(self, domain):
        raise NotImplementedError


def test_nonfinite_field(unit):
    with pytest.raises(FieldEvaluationError):
        _Broken().evaluate(0.0, np.zeros((1, 1)))


def test_step_budget(unit):
    flow = FlowMap(ConstantField([1.0]), unit, dtau=1e-3, max_steps=10)
    with pytest.raises(IntegrationBudgetError):
        flow.advect(0.0, 0.5, 0.1)


def test_stagnation_point_has_no_residence_bound(unit):
    # u = 0.5 - x stalls at x = 0.5, so nothing entering at x = 0 ever leaves
    flow = FlowMap(AffineField([0.5], [[-1.0]]), unit, dtau=1e-2, max_steps=2000)
    with pytest.raises(FlowAssumptionViolation):
        flow.residence_bound()


def test_zero_field_means_no_outflow(unit):
    assert FlowMap(ConstantField([0.0]), unit).residence_bound() == math.inf


def test_domain_classifier():
    dom = BoxDomain([1.0, 2.0])
    pts = np.array([[0.0, 1.0], [1.0, 1.0], [0.5, 0.0], [0.5, 2.0]])
    assert list(dom.boundary_class(pts)) == [INFLOW, OUTFLOW, SIDE, SIDE]
    np.testing.assert_allclose(dom.normal(pts[:2]), [[-1, 0], [1, 0]])
    assert dom.contains(np.array([[0.0, 0.5]]))[0]
    assert not dom.contains(np.array([[1.0, 0.5]]))[0]


def test_classifier_agrees_with_normal_sign():
    dom = BoxDomain([1.0, 1.0])
    assert dom.check_classifier(shear_field(1.0, 0.5), np.linspace(0, 1, 3)) == 1.0


def test_divergence_is_trace(rng):
    f = AffineField([1.0, 0.2], [[0.3, 0.1], [-0.2, 0.5]], amplitude=0.3, frequency=2.0)
    x = rng.random((5, 2))
    for t in (0.0, 0.7):
        np.testing.assert_allclose(f.divergence(t, x), np.trace(f.gradient(t, x), axis1=1, axis2=2))


def test_bounds_dominate_samples(rng):
    dom = BoxDomain([1.0])
    f = PolynomialField([1.0, 0.5, -0.4], amplitude=0.2, frequency=3.0)
    b = f.bounds(dom)
    x = rng.random((2000, 1))
    t = rng.random(2000) * 5
    assert np.max(np.abs(f.evaluate(t, x))) <= b.speed + 1e-12
    assert np.max(np.abs(f.divergence(t, x))) <= b.divergence + 1e-12


def test_time_dependent_field_residence():
    dom = BoxDomain([1.0])
    flow = FlowMap(ConstantField([1.0], amplitude=0.5, frequency=2 * math.pi), dom)
    t0 = flow.residence_bound()
    # slowest transit is within [1/1.5, 1/0.5]
    assert 1.1 / 1.5 < t0 <= 1.1 * 2.0


def test_flow_map_pickles(linear):
    clone = pickle.loads(pickle.dumps(linear))
    np.testing.assert_allclose(clone.advect(0, 0.2, 0.1), linear.advect(0, 0.2, 0.1))


def test_compiled_and_numpy_marchers_agree(rng):
    dom = BoxDomain([1.0, 1.0])
    field = AffineField([1.0, 0.1], [[0.2, 0.1], [0.0, -0.2]])
    a = FlowMap(field, dom, use_numba=True)
    b = FlowMap(field, dom, use_numba=False)
    x = rng.random((200, 2))
    ra = a.characteristics(0.0, 0.6, x)
    rb = b.characteristics(0.0, 0.6, x)
    np.testing.assert_array_equal(ra.exited, rb.exited)
    keep = ~ra.exited
    np.testing.assert_allclose(ra.x[keep], rb.x[keep], atol=1e-8)
    np.testing.assert_allclose(ra.exit_time[~keep], rb.exit_time[~keep], atol=1e-7)
