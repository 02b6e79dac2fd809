import hypothesis.strategies as st
import pytest

from extruder_stab.model import Gains, PhysicalParams, equilibrium_from_fill

REF_N_E = 3.5
PAPER_GAINS = Gains(k1=0.01, k2=0.0001)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def params():
    return PhysicalParams.reference()


@pytest.fixture
def eq_ref(params):
    return equilibrium_from_fill(params, 0.6, REF_N_E)


@pytest.fixture
def paper_gains():
    return PAPER_GAINS


@st.composite
def params_strategy(draw):
    """Reference parameters each scaled by a factor in [0.5, 2]."""
    base = PhysicalParams.reference()
    scale = st.floats(0.5, 2.0)
    return PhysicalParams(
        L=base.L * draw(scale),
        B=base.B * draw(scale),
        K_d=base.K_d * draw(scale),
        zeta=base.zeta * draw(scale),
        eta=base.eta * draw(scale),
        rho0=base.rho0 * draw(scale),
        S_eff=base.S_eff * draw(scale),
    )


@st.composite
def config_strategy(draw):
    """Feasible (params, equilibrium) pair."""
    p = draw(params_strategy())
    # l_e in (0.05 L, 0.95 L) mapped back to f_pe through the stationarity condition
    frac = draw(st.floats(0.05, 0.95))
    u = (1 - frac) * p.L
    f_pe = p.K_d * u / (p.B * p.rho0 + p.K_d * u)
    N_e = draw(st.floats(0.2, 20.0))
    return p, equilibrium_from_fill(p, f_pe, N_e)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
