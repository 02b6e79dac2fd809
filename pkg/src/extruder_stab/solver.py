"""Method-of-lines discretization of the closed-loop PFZ transport and interface ODE.

The filling ratio is advanced in advective (non-conservative) form with
first-order upwinding; time integration uses the Dormand-Prince 5(4) pair with
a PI step-size controller, capped by the explicit transport CFL bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Grid, SimState
from .model import (
    Actuation,
    Equilibrium,
    Gains,
    ModelError,
    PhysicalParams,
    inflow_ratio,
    interface_rhs,
    resolve_closed_loop,
)

logger = logging.getLogger(__name__)

FILL_BAND = 1e-6
MAX_REJECTIONS = 20


class SimulationFault(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    M: int = 128
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    dt_init: float = 0.1
    dt_max: float = 10.0
    cfl_safety: float = 0.9
    t_end: float = 1500.0
    output_stride: float = 5.0
    fixed_step: bool = False
    extrapolation: str = "linear"

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("solver tolerances must be > 0")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError(f"cfl_safety={self.cfl_safety!r} must lie in (0, 1]")
        if self.dt_init <= 0 or self.dt_max <= 0 or self.t_end <= 0 or self.output_stride <= 0:
            raise ValueError("dt_init, dt_max, t_end and output_stride must be > 0")
        if self.extrapolation not in ("linear", "constant"):
            raise ValueError(f"extrapolation must be 'linear' or 'constant', got {self.extrapolation!r}")
        if int(self.M) != self.M or self.M < 16:
            raise ValueError(f"M={self.M!r} must be an integer >= 16")


# Dormand-Prince 5(4) tableau (FSAL)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def upwind_derivative(f: np.ndarray, alpha: np.ndarray, left: float, right: float, dx: float) -> np.ndarray:
    """First-order upwind approximation of f_x, chosen by the sign of ``alpha``.

    ``left`` is the ghost value before cell 0 (inflow), ``right`` the ghost
    value after the last cell.
    """
    ext = np.empty(f.size + 2)
    ext[0], ext[1:-1], ext[-1] = left, f, right
    back = (ext[1:-1] - ext[:-2]) / dx
    fwd = (ext[2:] - ext[1:-1]) / dx
    return np.where(alpha > 0, back, fwd)


def interface_value(f: np.ndarray, extrapolation: str = "linear") -> float:
    """Filling ratio at x = 1 reconstructed from the last two cell averages."""
    if extrapolation == "constant":
        return float(f[-1])
    return float(1.5 * f[-1] - 0.5 * f[-2])


class ClosedLoopSystem:
    """Semi-discrete closed-loop system with state vector ``[l, f_0, ..., f_{M-1}]``."""

    def __init__(self, p: PhysicalParams, eq: Equilibrium, g: Gains, grid: Grid, extrapolation: str = "linear"):
        self.p, self.eq, self.g, self.grid = p, eq, g, grid
        self.extrapolation = extrapolation
        self.outflow_flags = 0

    def actuation(self, l: float) -> Actuation:
        return resolve_closed_loop(self.p, self.eq, self.g, l)

    def transport(self, y: np.ndarray):
        """Return (ldot, alpha, D, act, f1) for state vector ``y``."""
        p, grid = self.p, self.grid
        l, f = float(y[0]), y[1:]
        act = self.actuation(l)
        f1 = interface_value(f, self.extrapolation)
        ldot = interface_rhs(p, l, act.N, f1, act.dP)
        alpha = (p.zeta * act.N - grid.x * ldot) / l
        if (p.zeta * act.N - ldot) / l <= 0:
            self.outflow_flags += 1
        left = inflow_ratio(p, act.F_in, act.N)
        D = upwind_derivative(f, alpha, left, f1, grid.dx)
        return ldot, alpha, D, act, f1

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        ldot, alpha, D, _, _ = self.transport(y)
        out = np.empty_like(y)
        out[0] = ldot
        out[1:] = -alpha * D
        return out

    def max_speed(self, y: np.ndarray) -> float:
        _, alpha, _, _, _ = self.transport(y)
        return float(np.max(np.abs(alpha)))

    def check_state(self, y: np.ndarray) -> None:
        l, f = y[0], y[1:]
        if not np.all(np.isfinite(y)):
            raise SimulationFault("non-finite state")
        if not 0 < l < self.p.L:
            raise SimulationFault(f"interface left the barrel: l={l!r}")
        if f.min() <= -FILL_BAND or f.max() >= 1 + FILL_BAND:
            raise SimulationFault(f"filling ratio left (0, 1): min={f.min()!r}, max={f.max()!r}")


class FrozenTransport:
    """Constant-speed transport with prescribed inflow: a verification mode of the scheme."""

    def __init__(self, alpha: float, inflow: Callable[[float], float], grid: Grid, extrapolation: str = "linear"):
        self.alpha, self.inflow, self.grid = alpha, inflow, grid
        self.extrapolation = extrapolation
        self._alpha = np.full(grid.M, float(alpha))

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        f = y[1:]
        D = upwind_derivative(f, self._alpha, self.inflow(t), interface_value(f, self.extrapolation), self.grid.dx)
        out = np.zeros_like(y)
        out[1:] = -self._alpha * D
        return out

    def max_speed(self, y: np.ndarray) -> float:
        return abs(self.alpha)

    def check_state(self, y: np.ndarray) -> None:
        if not np.all(np.isfinite(y)):
            raise SimulationFault("non-finite state")


def rhs(p: PhysicalParams, eq: Equilibrium, g: Gains, grid: Grid, state: SimState, extrapolation: str = "linear"):
    """Time derivative ``(ldot, fdot)`` of the semi-discrete closed-loop system."""
    system = ClosedLoopSystem(p, eq, g, grid, extrapolation)
    y = state.as_vector()
    system.check_state(y)
    dy = system(state.t, y)
    return float(dy[0]), dy[1:]


@dataclass
class Integrator:
    """Adaptive Dormand-Prince 5(4) stepper with PI control; RK4 when ``fixed_step``."""

    cfg: SolverConfig
    system: Callable
    dt: float = field(init=False)
    _k_first: np.ndarray | None = field(init=False, default=None)
    _err_prev: float = field(init=False, default=1.0)
    rejections: int = field(init=False, default=0)
    n_steps: int = field(init=False, default=0)

    def __post_init__(self):
        self.dt = self.cfg.dt_init

    def cfl_limit(self, y: np.ndarray) -> float:
        speed = self.system.max_speed(y)
        dx = 1.0 / self.cfg.M if not hasattr(self.system, "grid") else self.system.grid.dx
        return math.inf if speed == 0 else self.cfg.cfl_safety * dx / speed

    def step(self, t: float, y: np.ndarray, dt_cap: float = math.inf):
        """Advance one accepted step; returns ``(t_new, y_new, dt_used, err)``.

        ``err`` is the max-norm of the embedded local error estimate (0 for RK4).
        """
        if self.cfg.fixed_step:
            dt = min(self.cfg.dt_init, dt_cap)
            y_new = _rk4(self.system, t, y, dt)
            self.system.check_state(y_new)
            self.n_steps += 1
            return t + dt, y_new, dt, 0.0

        cfl = self.cfl_limit(y)
        rejected = 0
        while True:
            dt = min(self.dt, self.cfg.dt_max, cfl, dt_cap)
            k = self._stages(t, y, dt)
            y_new = y + dt * (k.T @ _B5)
            err_vec = dt * (k.T @ _E)
            scale = self.cfg.abs_tol + self.cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
            if err <= 1.0 and np.all(np.isfinite(y_new)):
                break
            rejected += 1
            self.rejections += 1
            if rejected >= MAX_REJECTIONS:
                raise SimulationFault(f"step size control failed after {MAX_REJECTIONS} rejections at t={t!r}")
            fac = 0.2 if not math.isfinite(err) else max(0.2, 0.9 * err ** -0.2)
            self.dt = dt * min(1.0, fac)
            self._k_first = None
        self.system.check_state(y_new)
        # PI controller (Gustafsson): exponents 0.7/5 and 0.4/5
        err_c = max(err, 1e-10)
        fac = 0.9 * err_c ** -0.14 * self._err_prev ** 0.08
        fac = min(5.0, max(0.2, fac))
        if rejected:
            fac = min(fac, 1.0)
        self._err_prev = err_c
        # only grow from an uncapped step so that output clipping does not shrink dt
        if dt >= min(self.dt, self.cfg.dt_max, cfl) * (1 - 1e-12):
            self.dt = dt * fac
        self._k_first = k[-1]
        self.n_steps += 1
        return t + dt, y_new, dt, float(np.max(np.abs(err_vec)))

    def _stages(self, t, y, dt):
        k = np.empty((7, y.size))
        k[0] = self._k_first if self._k_first is not None else self.system(t, y)
        for i in range(1, 7):
            yi = y + dt * (np.asarray(_A[i]) @ k[:i])
            k[i] = self.system(t + _C[i] * dt, yi)
        return k


def _rk4(system, t, y, dt):
    k1 = system(t, y)
    k2 = system(t + dt / 2, y + dt / 2 * k1)
    k3 = system(t + dt / 2, y + dt / 2 * k2)
    k4 = system(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def step(cfg: SolverConfig, p: PhysicalParams, eq: Equilibrium, g: Gains, grid: Grid, state: SimState):
    """One accepted adaptive step from ``state``: ``(new_state, dt_used, error_estimate)``."""
    system = ClosedLoopSystem(p, eq, g, grid, cfg.extrapolation)
    integ = Integrator(cfg, system)
    t, y, dt, err = integ.step(state.t, state.as_vector())
    return SimState(t=t, l=float(y[0]), f=y[1:], act=system.actuation(float(y[0]))), dt, err


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    states: list[SimState] = field(default_factory=list)
    dt_used: list[float] = field(default_factory=list)
    readings: list = field(default_factory=list)
    status: str = "completed"
    reason: str = ""
    fault_time: float | None = None
    lyapunov: object | None = None
    n_steps: int = 0
    rejections: int = 0
    outflow_flags: int = 0

    @property
    def completed(self) -> bool:
        return self.status == "completed"


def sample_profile(f0: Callable, grid: Grid) -> np.ndarray:
    return np.asarray(f0(grid.x), dtype=float) * np.ones(grid.M)


def integrate(cfg: SolverConfig, system, y0: np.ndarray, t_end: float | None = None) -> Trajectory:
    """Integrate ``system`` from ``y0`` sampling at multiples of ``cfg.output_stride``.

    Faults end the run and are recorded in the returned trajectory.
    """
    t_end = cfg.t_end if t_end is None else t_end
    integ = Integrator(cfg, system)
    traj = Trajectory()
    t, y = 0.0, y0.copy()

    def record(t, y, dt):
        act = system.actuation(float(y[0])) if hasattr(system, "actuation") else None
        traj.times.append(t)
        traj.states.append(SimState(t=t, l=float(y[0]), f=y[1:].copy(), act=act))
        traj.dt_used.append(dt)

    try:
        system.check_state(y)
        record(t, y, 0.0)
        n_out = int(math.floor(t_end / cfg.output_stride + 1e-9))
        targets = [cfg.output_stride * k for k in range(1, n_out + 1)]
        if not targets or targets[-1] < t_end * (1 - 1e-12):
            targets.append(t_end)
        last_dt = 0.0
        for target in targets:
            while t < target * (1 - 1e-13):
                t, y, last_dt, _ = integ.step(t, y, dt_cap=target - t)
            t = target
            record(t, y, last_dt)
    except (SimulationFault, ModelError) as exc:
        traj.status = "fault"
        traj.reason = f"{type(exc).__name__}: {exc}"
        traj.fault_time = t
        logger.warning("simulation fault at t=%g: %s", t, exc)
    traj.n_steps = integ.n_steps
    traj.rejections = integ.rejections
    traj.outflow_flags = getattr(system, "outflow_flags", 0)
    return traj


@dataclass(frozen=True)
class TrigProfile:
    """Initial filling ratio ``a + b (1 - cos(pi x)) + c sin(pi x)``."""

    a: float
    b: float
    c: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.a + self.b * (1 - np.cos(np.pi * x)) + self.c * np.sin(np.pi * x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return np.pi * (self.b * np.sin(np.pi * x) + self.c * np.cos(np.pi * x))


@dataclass(frozen=True)
class TabulatedProfile:
    """Piecewise-linear profile through ``(x, value)`` nodes covering [0, 1]."""

    x: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.x) != len(self.values) or len(self.x) < 2:
            raise ValueError("tabulated profile needs matching x/values of length >= 2")
        if list(self.x) != sorted(self.x) or self.x[0] > 0 or self.x[-1] < 1:
            raise ValueError("tabulated x must be increasing and cover [0, 1]")

    def __call__(self, x):
        return np.interp(x, self.x, self.values)

    def derivative(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        i = np.clip(np.searchsorted(self.x, x, side="right") - 1, 0, len(self.x) - 2)
        xs, vs = np.asarray(self.x), np.asarray(self.values)
        d = (vs[i + 1] - vs[i]) / (xs[i + 1] - xs[i])
        return d if d.size > 1 else float(d[0])


PROFILE_PRESETS = {
    "paper-sec4": TrigProfile(0.6905, 0.025, 0.0117),
}


def simulate(
    cfg: SolverConfig,
    p: PhysicalParams,
    eq: Equilibrium,
    g: Gains,
    grid: Grid,
    l0: float,
    f0: Callable,
    lyapunov="auto",
    strict_compat: bool = False,
    compat_tol: float = 1e-6,
) -> Trajectory:
    """Closed-loop run from ``(l0, f0)`` with Lyapunov readings at every sample.

    ``lyapunov`` is a ``LyapunovConfig``, ``"auto"`` (constants selected with
    the run itself as probe trajectory) or ``None`` (no readings).
    """
    from . import linearization as lin
    from . import lyapunov as lyap

    deriv = getattr(f0, "derivative", None)
    report = lin.check_compatibility(
        p, eq, g, l0, f0, df0_at_0=float(deriv(0.0)) if deriv else None, tol=compat_tol
    )
    if not all(report.passes):
        msg = f"compatibility residuals c1={report.c1_residual:.3g}, c2={report.c2_residual:.3g} exceed {compat_tol:g}"
        if strict_compat:
            raise ValueError(msg)
        logger.warning(msg)

    system = ClosedLoopSystem(p, eq, g, grid, cfg.extrapolation)
    y0 = np.concatenate(([l0], sample_profile(f0, grid)))
    traj = integrate(cfg, system, y0)
    traj.compatibility = report

    if lyapunov is None:
        return traj
    if lyapunov == "auto":
        lc = lin.linearize(p, eq)
        th = lin.theta_constants(lc, eq, p, g)
        try:
            lyapunov = lyap.select_constants(lc, th, eq, probe=traj.states, grid=grid)
        except lyap.ConstantSelectionError as exc:
            logger.warning("Lyapunov constant selection failed (%s); using unit constants", exc)
            lyapunov = lyap.LyapunovConfig(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    traj.lyapunov = lyapunov
    traj.readings = [lyap.evaluate(lyapunov, eq, grid, s) for s in traj.states]
    return traj
