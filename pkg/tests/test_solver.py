import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import REF_N_E
from extruder_stab.grid import Grid, SimState
from extruder_stab.model import Gains, PhysicalParams, equilibrium_from_fill
from extruder_stab.solver import (
    PROFILE_PRESETS,
    ClosedLoopSystem,
    FrozenTransport,
    SimulationFault,
    SolverConfig,
    TabulatedProfile,
    TrigProfile,
    integrate,
    interface_value,
    rhs,
    simulate,
    step,
    upwind_derivative,
)


def smooth(x):
    return 0.5 + 0.2 * np.sin(2 * np.pi * np.asarray(x))


def frozen_error(M, alpha=0.5, T=0.5):
    """L2 error of the upwind scheme against the exact travelling profile."""
    g = Grid(M)
    system = FrozenTransport(alpha, lambda t: float(smooth(-alpha * t)), g)
    cfg = SolverConfig(M=M, fixed_step=True, dt_init=0.5 * g.dx / alpha, t_end=T, output_stride=T)
    tr = integrate(cfg, system, np.concatenate(([1.0], smooth(g.x))))
    exact = smooth(g.x - alpha * T)
    return float(np.sqrt(g.dx * np.sum((tr.states[-1].f - exact) ** 2)))


def test_grid():
    g = Grid(16)
    assert g.dx == 1 / 16
    assert g.x[0] == pytest.approx(1 / 32) and g.x[-1] == pytest.approx(1 - 1 / 32)
    assert np.allclose(np.diff(g.x), g.dx)
    with pytest.raises(ValueError):
        Grid(8)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(cfl_safety=1.5)
    with pytest.raises(ValueError):
        SolverConfig(rel_tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(extrapolation="cubic")


def test_upwind_direction():
    f = np.array([1.0, 2.0, 4.0])
    D = upwind_derivative(f, np.array([1.0, 1.0, -1.0]), 0.0, 8.0, 1.0)
    assert D.tolist() == [1.0, 1.0, 4.0]


def test_interface_extrapolation():
    f = np.array([0.1, 0.2, 0.3, 0.4])
    assert interface_value(f) == pytest.approx(0.45)
    assert interface_value(f, "constant") == 0.4


def test_rhs_vanishes_at_equilibrium(params, eq_ref, paper_gains):
    g = Grid(128)
    state = SimState(0.0, eq_ref.l_e, np.full(g.M, eq_ref.f_pe))
    ldot, fdot = rhs(params, eq_ref, paper_gains, g, state)
    assert abs(ldot) < 1e-10
    assert np.max(np.abs(fdot)) < 1e-10


def test_rhs_constant_profile_with_matching_inflow(params, eq_ref):
    g = Grid(64)
    # open loop: inflow ratio is f_pe, so the uniform profile f_pe is transport-invariant
    state = SimState(0.0, 1.3, np.full(g.M, eq_ref.f_pe))
    ldot, fdot = rhs(params, eq_ref, Gains(0.0, 0.0), g, state)
    assert np.max(np.abs(fdot)) < 1e-15
    assert abs(ldot) > 1e-4


def test_rhs_faults_outside_unit_interval(params, eq_ref, paper_gains):
    g = Grid(32)
    f = np.full(g.M, eq_ref.f_pe)
    f[3] = 1.01
    with pytest.raises(SimulationFault):
        rhs(params, eq_ref, paper_gains, g, SimState(0.0, eq_ref.l_e, f))


def test_frozen_transport_first_order():
    errors = [frozen_error(M) for M in (64, 128, 256)]
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all((orders > 0.8) & (orders < 1.2))


@settings(max_examples=20, deadline=None)
@given(
    st.lists(st.floats(0.1, 0.9), min_size=3, max_size=8),
    st.floats(0.0, 1.0),
    st.floats(0.1, 2.0),
)
def test_frozen_maximum_principle(values, w, alpha):
    x = tuple(np.linspace(0, 1, len(values)))
    prof = TabulatedProfile(x, tuple(values))
    lo, hi = min(values), max(values)
    inflow = lo + w * (hi - lo)
    g = Grid(32)
    cfg = SolverConfig(M=32, fixed_step=True, dt_init=0.9 * g.dx / alpha, t_end=1.5 / alpha, output_stride=0.1 / alpha)
    tr = integrate(cfg, FrozenTransport(alpha, lambda t: inflow, g, "constant"), np.concatenate(([1.0], prof(g.x))))
    for s in tr.states:
        assert s.f.min() >= lo - 1e-12 and s.f.max() <= hi + 1e-12


def test_step_at_equilibrium(params, eq_ref, paper_gains):
    g = Grid(64)
    s0 = SimState(0.0, eq_ref.l_e, np.full(g.M, eq_ref.f_pe))
    cfg = SolverConfig(M=64)
    s1, dt, err = step(cfg, params, eq_ref, paper_gains, g, s0)
    assert dt > 0
    assert abs(s1.l - s0.l) < cfg.abs_tol
    assert np.max(np.abs(s1.f - s0.f)) < cfg.abs_tol


def test_step_respects_cfl(params, eq_ref, paper_gains):
    g = Grid(128)
    s0 = SimState(0.0, 1.5, PROFILE_PRESETS["paper-sec4"](g.x))
    cfg = SolverConfig(dt_init=100.0, dt_max=100.0, cfl_safety=0.7, rel_tol=1e-3, abs_tol=1e-3)
    system = ClosedLoopSystem(params, eq_ref, paper_gains, g)
    bound = 0.7 * g.dx / system.max_speed(s0.as_vector())
    _, dt, _ = step(cfg, params, eq_ref, paper_gains, g, s0)
    assert dt <= bound * (1 + 1e-12)


def test_step_tolerance_response(params, eq_ref, paper_gains):
    g = Grid(128)
    s0 = SimState(0.0, 1.5, PROFILE_PRESETS["paper-sec4"](g.x))
    errs = []
    for rt in (1e-6, 5e-7, 2.5e-7, 1.25e-7):
        _, _, err = step(SolverConfig(rel_tol=rt, abs_tol=1e-12, dt_init=5.0), params, eq_ref, paper_gains, g, s0)
        errs.append(err)
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_cfl_safety_insensitive(params, eq_ref, paper_gains):
    runs = [
        simulate(SolverConfig(cfl_safety=c, t_end=300), params, eq_ref, paper_gains, Grid(128), 1.5,
                 PROFILE_PRESETS["paper-sec4"], lyapunov=None)
        for c in (0.5, 1.0)
    ]
    for a, b in zip(runs[0].states, runs[1].states):
        assert abs(a.l - b.l) < 1e-7
        assert np.max(np.abs(a.f - b.f)) < 1e-5


def test_simulate_at_equilibrium(params, eq_ref, paper_gains):
    flat = TrigProfile(eq_ref.f_pe, 0.0, 0.0)
    tr = simulate(SolverConfig(t_end=100, output_stride=10), params, eq_ref, paper_gains, Grid(64), eq_ref.l_e, flat)
    assert tr.completed
    assert tr.times[0] == 0.0 and np.all(np.diff(tr.times) > 0)
    for r in tr.readings:
        assert r.V0 < 1e-24 and r.Lcomposite < 1e-18 and r.h2_err < 1e-18


def test_simulate_strict_compat(params, eq_ref, paper_gains):
    with pytest.raises(ValueError, match="compatibility"):
        simulate(SolverConfig(t_end=10), params, eq_ref, paper_gains, Grid(32), 1.5,
                 PROFILE_PRESETS["paper-sec4"], strict_compat=True)


def test_fixed_step_determinism(params, eq_ref, paper_gains):
    cfg = SolverConfig(fixed_step=True, dt_init=0.5, t_end=100, output_stride=10)
    a = simulate(cfg, params, eq_ref, paper_gains, Grid(64), 1.5, PROFILE_PRESETS["paper-sec4"])
    b = simulate(cfg, params, eq_ref, paper_gains, Grid(64), 1.5, PROFILE_PRESETS["paper-sec4"])
    for s, u in zip(a.states, b.states):
        assert s.l == u.l and np.array_equal(s.f, u.f)


def test_fault_is_recorded(params, eq_ref):
    tr = simulate(SolverConfig(t_end=1500), params, eq_ref, Gains(0.0, 1e-4), Grid(64), 1.5,
                  PROFILE_PRESETS["paper-sec4"], lyapunov=None)
    assert tr.status == "fault" and tr.fault_time is not None and tr.reason


@pytest.mark.slow
def test_grid_convergence(params, eq_ref, paper_gains):
    from extruder_stab.lyapunov import fit_decay

    omegas, finals = [], []
    for M in (64, 128, 256):
        tr = simulate(SolverConfig(M=M, t_end=1500), params, eq_ref, paper_gains, Grid(M), 1.5, PROFILE_PRESETS["paper-sec4"])
        omegas.append(fit_decay(tr.times, [r.Lcomposite for r in tr.readings]).omega)
        finals.append(tr.states[-1].l)
    d1, d2 = abs(omegas[1] - omegas[0]), abs(omegas[2] - omegas[1])
    assert d2 < d1
    assert max(finals) - min(finals) < 1e-4 * params.L


def test_profiles():
    p = TrigProfile(0.6905, 0.025, 0.0117)
    assert p(0.0) == pytest.approx(0.6905)
    assert p(1.0) == pytest.approx(0.7405)
    h = 1e-6
    assert p.derivative(0.3) == pytest.approx((p(0.3 + h) - p(0.3 - h)) / (2 * h), rel=1e-6)
    t = TabulatedProfile((0.0, 0.5, 1.0), (0.5, 0.7, 0.6))
    assert t(0.25) == pytest.approx(0.6)
    assert t.derivative(0.0) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        TabulatedProfile((0.1, 1.0), (0.5, 0.6))
