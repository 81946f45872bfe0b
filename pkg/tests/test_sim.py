import numpy as np
import pytest

from symcon.errors import SimulationError
from symcon.model import Partition, assemble_network, loads_model
from symcon.sim import (
    SolverConfig, Trajectory, convergence_rate, fcd_experiment, integrate,
    integrate_dde, periodicity_check, sync_error,
)
from symcon.symmetry import build_action

DECAY = "system decay\nstates\n  x\ndynamics\n  d/dt x = -x\n"

FORCED = "system forced\nstates\n  x\ndynamics\n  d/dt x = -x + sin(t)\n"

CHAIN4 = """
network chain4
params
  k = 1
template osc {
  states x
  dynamics d/dt x = -x
}
node 1 : osc
node 2 : osc
node 3 : osc
node 4 : osc
coupling diff(tail, head) = k*(tail - head)
edge 1 <-> 2 : diff
edge 2 <-> 3 : diff
edge 3 <-> 4 : diff
"""

I1FFL = """
system i1ffl
params
  b1 = 1
  b2 = 1
  a1 = 1
  a2 = 1
  chimin = 1
states
  Y Z
inputs
  chi external
dynamics
  d/dt Y = b1*chi - a1*Y
  d/dt Z = b2*chi/Y - a2*Z
action fold map { Y -> Y/chimin, Z -> Z } input-map { chi -> chi/chimin }
"""


def _decay():
    return loads_model(DECAY)


# ---------------------------------------------------------------------------
# basic integration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["rk4-fixed", "rk45-adaptive"])
def test_exponential_decay_closed_form(method):
    cfg = SolverConfig(method=method, horizon=5.0, dt=0.001, rtol=1e-10, atol=1e-12)
    traj = integrate(_decay(), [1.0], cfg)
    assert traj.x[-1, 0] == pytest.approx(np.exp(-5.0), abs=1e-8)
    assert traj.at(5.0)[0] == pytest.approx(np.exp(-5.0), abs=1e-8)


def test_forced_oscillator_reaches_sinusoidal_steady_state():
    m = loads_model(FORCED)
    cfg = SolverConfig(horizon=40.0, rtol=1e-10, atol=1e-12)
    traj = integrate(m, [3.0], cfg)
    # closed-form particular solution of the forced linear equation
    ts = np.linspace(25.0, 40.0, 50)
    exact = (np.sin(ts) - np.cos(ts)) / 2.0
    assert np.max(np.abs(traj.at(ts)[:, 0] - exact)) < 1e-6
    assert periodicity_check(traj, 2 * np.pi, tail=10.0) < 1e-6


def test_periodicity_negative_control():
    m = loads_model(FORCED)
    traj = integrate(m, [0.0], SolverConfig(horizon=40.0))
    # half the true period is far from periodic
    assert periodicity_check(traj, np.pi, tail=10.0) > 0.5


def test_periodicity_constant_system():
    m = loads_model("system c\nstates\n  x\ndynamics\n  d/dt x = 0\n")
    traj = integrate(m, [2.0], SolverConfig(horizon=20.0))
    assert periodicity_check(traj, 3.0, tail=5.0) <= 1e-12


def test_periodicity_horizon_guard():
    traj = integrate(_decay(), [1.0], SolverConfig(horizon=5.0))
    with pytest.raises(SimulationError, match="horizon"):
        periodicity_check(traj, 2.0, tail=2.0)


def test_rk4_fourth_order_convergence():
    m = _decay()
    errs = []
    for dt in (0.1, 0.05, 0.025):
        cfg = SolverConfig(method="rk4-fixed", horizon=2.0, dt=dt)
        traj = integrate(m, [1.0], cfg)
        errs.append(abs(traj.x[-1, 0] - np.exp(-2.0)))
    for a, b in zip(errs, errs[1:]):
        assert a / b == pytest.approx(16.0, rel=0.2)


def test_rk45_respects_tolerance():
    cfg = SolverConfig(horizon=5.0, rtol=1e-8, atol=1e-12)
    traj = integrate(_decay(), [1.0], cfg)
    err = abs(traj.x[-1, 0] - np.exp(-5.0))
    assert err <= 10 * 1e-8


def test_dense_output_midpoints():
    cfg = SolverConfig(method="rk4-fixed", horizon=2.0, dt=0.05)
    traj = integrate(_decay(), [1.0], cfg)
    mids = traj.t[:-1] + 0.025
    exact = np.exp(-mids)
    assert np.max(np.abs(traj.at(mids)[:, 0] - exact)) < 1e-7


def test_nan_detection_aborts():
    m = loads_model("system blow\nstates\n  x\ndynamics\n  d/dt x = x^2\n")
    with pytest.raises(SimulationError, match="t="):
        integrate(m, [1.0], SolverConfig(method="rk4-fixed", horizon=5.0, dt=0.01))


def test_delayed_model_rejected_by_integrate():
    m = loads_model("system d\nstates\n  x\ndelays\n  tau = 1\n"
                    "dynamics\n  d/dt x = -x@tau\n")
    with pytest.raises(SimulationError, match="delayed"):
        integrate(m, [1.0], SolverConfig())


def test_trajectory_invariants():
    with pytest.raises(SimulationError):
        Trajectory([0.0, 0.0], np.zeros((2, 1)), ("x",))
    with pytest.raises(SimulationError):
        Trajectory([0.0, 1.0], np.zeros((2, 2)), ("x",))
    traj = integrate(_decay(), [1.0], SolverConfig(horizon=1.0))
    sub = traj.resample(np.linspace(0.0, 1.0, 11))
    assert len(sub.t) == 11
    assert np.allclose(sub.component("x"), np.exp(-sub.t), atol=1e-7)
    with pytest.raises(SimulationError):
        traj.component("y")


def test_solver_config_validation():
    with pytest.raises(SimulationError):
        SolverConfig(method="euler")
    with pytest.raises(SimulationError):
        SolverConfig(dt=0.0)
    with pytest.raises(SimulationError):
        SolverConfig(horizon=-1.0)


# ---------------------------------------------------------------------------
# delayed integration
# ---------------------------------------------------------------------------

DDE1 = ("system lag\nstates\n  x\ndelays\n  tau = 1\n"
        "dynamics\n  d/dt x = -x@tau\n")


def test_dde_step_halving_self_convergence():
    m = loads_model(DDE1)
    a = integrate_dde(m, np.array([1.0]), SolverConfig(method="rk4-fixed", horizon=10.0, dt=0.01))
    b = integrate_dde(m, np.array([1.0]), SolverConfig(method="rk4-fixed", horizon=10.0, dt=0.005))
    ts = np.linspace(0.0, 10.0, 101)
    assert np.max(np.abs(a.at(ts) - b.at(ts))) <= 1e-5
    # oscillatory decay of the scalar lag equation: it goes negative
    assert np.min(a.x[:, 0]) < 0.0


def test_zero_delay_matches_ode():
    m = loads_model("system z\nstates\n  x\ndelays\n  tau = 0\n"
                    "dynamics\n  d/dt x = -x@tau\n")
    cfg = SolverConfig(method="rk4-fixed", horizon=5.0, dt=0.01)
    a = integrate_dde(m, np.array([1.0]), cfg)
    b = integrate(_decay(), [1.0], cfg)
    assert np.max(np.abs(a.x - b.x)) <= 1e-10


def test_incommensurate_step_adjusted_with_warning():
    m = loads_model(DDE1.replace("tau = 1", "tau = 0.5"))
    cfg = SolverConfig(method="rk4-fixed", horizon=2.0, dt=0.3)
    with pytest.warns(UserWarning, match="adjusted"):
        traj = integrate_dde(m, np.array([1.0]), cfg)
    # adjusted step divides the delay exactly
    dt = traj.t[1] - traj.t[0]
    assert (0.5 / dt) == pytest.approx(round(0.5 / dt), abs=1e-9)


def test_incommensurate_delays_rejected():
    text = ("system d2\nstates\n  x\ndelays\n  a = 1\n  b = 0.70710678118654752\n"
            "dynamics\n  d/dt x = -x@a - x@b\n")
    m = loads_model(text)
    with pytest.raises(SimulationError, match="commensurate"):
        integrate_dde(m, np.array([1.0]), SolverConfig(method="rk4-fixed", horizon=1.0, dt=0.1))


def test_constant_history_callable_equivalent():
    m = loads_model(DDE1)
    cfg = SolverConfig(method="rk4-fixed", horizon=3.0, dt=0.01)
    a = integrate_dde(m, np.array([1.0]), cfg)
    b = integrate_dde(m, lambda t: np.array([1.0]), cfg)
    assert np.array_equal(a.x, b.x)


# ---------------------------------------------------------------------------
# synchronization metrics
# ---------------------------------------------------------------------------

def test_sync_error_on_subspace_is_zero():
    m = assemble_network(loads_model(CHAIN4))
    traj = integrate(m, np.full(4, 2.0), SolverConfig(horizon=10.0))
    _, e = sync_error(traj, Partition((("1", "2", "3", "4"),)))
    assert np.max(e) <= 1e-12


def test_sync_error_singletons_vacuous():
    m = assemble_network(loads_model(CHAIN4))
    traj = integrate(m, np.array([1.0, -2.0, 3.0, 0.5]), SolverConfig(horizon=1.0))
    _, e = sync_error(traj, Partition((("1",), ("2",), ("3",), ("4",))))
    assert np.max(e) == 0.0


def test_chain_synchronizes_and_rate_matches_transverse_spectrum():
    m = assemble_network(loads_model(CHAIN4))
    rng = np.random.default_rng(11)
    traj = integrate(m, rng.uniform(-2, 2, 4),
                     SolverConfig(horizon=30.0, rtol=1e-10, atol=1e-13))
    t, e = sync_error(traj, Partition((("1", "2", "3", "4"),)))
    assert e[np.searchsorted(t, 30.0) - 1] < 1e-6
    # slowest transverse mode of the chain Jacobian decays at 3 - sqrt(2)
    rate = convergence_rate(t, e, window=(5.0, 12.0))
    assert rate == pytest.approx(3.0 - np.sqrt(2.0), rel=0.05)


def test_convergence_rate_exact_exponential():
    t = np.linspace(0.0, 10.0, 200)
    assert convergence_rate(t, 3.0 * np.exp(-2.0 * t)) == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(SimulationError):
        convergence_rate(t, np.zeros_like(t))


# ---------------------------------------------------------------------------
# matched-input scaling experiments
# ---------------------------------------------------------------------------

def _i1ffl_pair(chimin):
    m = loads_model(I1FFL, params={"chimin": chimin})
    return m, build_action(m, "fold")


def test_fcd_step_doubling_shared_output():
    m_i, pair_i = _i1ffl_pair(1.0)
    m_j, pair_j = _i1ffl_pair(2.0)
    cfg = SolverConfig(horizon=30.0, rtol=1e-9, atol=1e-12)
    rep = fcd_experiment(
        m_i, pair_i, pair_j,
        input_i=lambda t: 1.0 + (t >= 10.0),          # 1 -> 2
        input_j=lambda t: 2.0 * (1.0 + (t >= 10.0)),  # 2 -> 4
        shared=["Z"], x0_i=[1.0, 1.0], x0_j=[2.0, 1.0], cfg=cfg)
    assert rep["input_residual"] <= 1e-10
    assert rep["max_shared_gap"] <= 1e-6
    assert rep["max_transformed_gap"] <= 1e-6
    # the pulse exists: Z leaves 1 after the step, then returns toward 1
    z = rep["traj_i"].at(np.linspace(10.0, 30.0, 200))[:, 1]
    assert np.max(np.abs(z - 1.0)) > 0.1
    assert abs(z[-1] - 1.0) < 1e-3


def test_fcd_invariance_random_steps():
    rng = np.random.default_rng(23)
    for _ in range(5):
        base = float(rng.uniform(0.5, 3.0))
        jump = float(rng.uniform(1.2, 4.0))
        t_step = float(rng.uniform(5.0, 15.0))
        m_i, pair_i = _i1ffl_pair(base)
        m_j, pair_j = _i1ffl_pair(2.0 * base)
        cfg = SolverConfig(horizon=25.0, rtol=1e-9, atol=1e-12)
        rep = fcd_experiment(
            m_i, pair_i, pair_j,
            input_i=lambda t: base * (1.0 + (jump - 1.0) * (t >= t_step)),
            input_j=lambda t: 2.0 * base * (1.0 + (jump - 1.0) * (t >= t_step)),
            shared=["Z"], x0_i=[base, 1.0], x0_j=[2.0 * base, 1.0], cfg=cfg)
        assert rep["max_shared_gap"] <= 1e-6


def test_fcd_mismatched_inputs_guard():
    m_i, pair_i = _i1ffl_pair(1.0)
    m_j, pair_j = _i1ffl_pair(2.0)
    cfg = SolverConfig(horizon=10.0)
    kwargs = dict(
        input_i=lambda t: 1.0,
        input_j=lambda t: 3.0,  # scaled signals disagree: 1 vs 1.5
        shared=["Z"], x0_i=[1.0, 1.0], x0_j=[2.0, 1.0], cfg=cfg)
    with pytest.raises(SimulationError, match="differ"):
        fcd_experiment(m_i, pair_i, pair_j, **kwargs)
    rep = fcd_experiment(m_i, pair_i, pair_j, require_matched_inputs=False, **kwargs)
    assert rep["input_residual"] > 0.1
    assert rep["max_shared_gap"] > 1e-3


def test_fcd_shared_initial_values_enforced():
    m_i, pair_i = _i1ffl_pair(1.0)
    m_j, pair_j = _i1ffl_pair(2.0)
    with pytest.raises(SimulationError, match="different values"):
        fcd_experiment(m_i, pair_i, pair_j,
                       input_i=lambda t: 1.0, input_j=lambda t: 2.0,
                       shared=["Z"], x0_i=[1.0, 1.0], x0_j=[2.0, 1.5],
                       cfg=SolverConfig(horizon=5.0))


def test_fcd_identical_arms_zero_gap():
    m_i, pair_i = _i1ffl_pair(1.0)
    rep = fcd_experiment(m_i, pair_i, pair_i,
                         input_i=lambda t: 1.0, input_j=lambda t: 1.0,
                         shared=["Y", "Z"], x0_i=[1.0, 1.0], x0_j=[1.0, 1.0],
                         cfg=SolverConfig(horizon=10.0))
    assert rep["max_shared_gap"] == 0.0
    assert rep["max_transformed_gap"] == 0.0
