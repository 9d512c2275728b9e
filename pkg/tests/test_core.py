import numpy as np
import pytest

from robustcbf import core


def test_agent_state_roundtrip():
    x = core.AgentState([1.0, 2.0], [3.0, 4.0], [5.0])
    assert x.dim == 5
    y = core.AgentState.from_vector(x.vector)
    assert np.array_equal(y.vector, x.vector)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(core.NonFiniteInput):
        core.AgentState([bad, 0.0], [0.0, 0.0])
    with pytest.raises(core.NonFiniteInput):
        core.Disturbance([0.0, 0.0], [0.0, bad])


def test_state_shape_checked():
    with pytest.raises(ValueError):
        core.AgentState([1.0, 2.0, 3.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        core.AgentState.from_vector([1.0, 2.0, 3.0])


def test_double_integrator_by_hand():
    dyn = core.drag_double_integrator(dt=0.1, c_drag=0.1, u_max=10.0, gain_bump=0.2)
    x = np.array([1.0, -1.0, 2.0, 0.0])
    u = np.array([1.0, 1.0])
    s = 1.0 + 0.2 / (1.0 + 4.0)
    nxt = core.step_robot(dyn, x, u)
    assert np.allclose(nxt.p, [1.2, -1.0])
    assert np.allclose(nxt.v, [2.0 * 0.99 + 0.1 * s, 0.1 * s])
    assert np.allclose(dyn.g(x)[:2], 0.0)


def test_control_limit_enforced():
    dyn = core.drag_double_integrator(u_max=1.0)
    with pytest.raises(ValueError):
        core.step_robot(dyn, np.zeros(4), [1.0, 0.5])


def test_constant_velocity_keeps_velocity():
    model = core.constant_velocity(dt=0.5)
    nxt = core.step_agent(model, [0.0, 0.0, 1.0, -2.0])
    assert np.allclose(nxt.vector, [0.5, -1.0, 1.0, -2.0])


def test_extract_disturbance_inverts_step():
    rng = np.random.default_rng(3)
    dyn = core.drag_double_integrator()
    model = core.constant_velocity()
    for _ in range(20):
        x = rng.normal(size=4)
        u = rng.normal(size=2)
        d = rng.normal(size=4)
        nxt = core.step_robot(dyn, x, u, d)
        assert np.allclose(core.extract_disturbance(dyn, x, nxt, u).vector, d, atol=1e-12)
        nxt_h = core.step_agent(model, x, core.Disturbance.from_vector(d))
        assert np.allclose(core.extract_disturbance(model, x, nxt_h).vector, d, atol=1e-12)


def test_disturbance_padding_leaves_extra_states():
    dyn = core.drag_double_integrator()
    x = np.array([0.0, 0.0, 0.0, 0.0, 7.0])
    nxt = core.step_robot(dyn, x, np.zeros(2), [1.0, 1.0, 1.0, 1.0])
    assert nxt.z[0] == 7.0
    with pytest.raises(ValueError):
        core.step_robot(dyn, x, np.zeros(2), [1.0, 1.0, 1.0])
