"""Weighted Lyapunov functionals on discrete states and decay-rate fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .grid import Grid, SimState
from .linearization import LinearizationConstants, ThetaConstants, interface_form_matrix
from .model import Equilibrium

GAMMA_MAX = 10.0
A_CAP = 2.0**30
MIN_FIT_SAMPLES = 10
R2_VALID = 0.99
_A1_GRID = np.logspace(-6, 12, 18 * 13 + 1)


class ConstantSelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class LyapunovConfig:
    gamma1: float
    gamma2: float
    gamma3: float
    A1: float
    A2: float
    A3: float
    # diagnostics of the selection; not part of the functional itself
    form_lambda_max: float = float("nan")
    theta2_hat: float = float("nan")
    theta3_hat: float = float("nan")

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "A1", "A2", "A3"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"LyapunovConfig.{name} must be finite and > 0, got {value!r}")


@dataclass(frozen=True)
class LyapunovReading:
    V0: float
    V1: float
    V2: float
    V3: float
    Lcomposite: float
    h2_err: float


@dataclass(frozen=True)
class DecayFit:
    omega: float
    Mconst: float
    window: tuple[float, float]
    r2: float
    n_samples: int

    @property
    def valid(self) -> bool:
        return self.n_samples >= MIN_FIT_SAMPLES and self.r2 > R2_VALID


def derivatives(f: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """Second-order first and second derivatives on cell centres.

    Central stencils inside, one-sided second-order stencils at both ends.
    """
    fx = np.empty_like(f)
    fxx = np.empty_like(f)
    fx[1:-1] = (f[2:] - f[:-2]) / (2 * dx)
    fx[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * dx)
    fx[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * dx)
    fxx[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / dx**2
    fxx[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / dx**2
    fxx[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / dx**2
    return fx, fxx


def weighted_integral(values: np.ndarray, x: np.ndarray, gamma: float, dx: float) -> float:
    return float(np.sum(np.exp(-gamma * x) * values) * dx)


def combine(cfg: LyapunovConfig, V0: float, V1: float, V2: float, V3: float) -> float:
    return V3 + cfg.A3 * (V2 + cfg.A2 * (V0 + cfg.A1 * V1))


def evaluate(cfg: LyapunovConfig, eq: Equilibrium, grid: Grid, state: SimState) -> LyapunovReading:
    fbar = state.f - eq.f_pe
    fx, fxx = derivatives(fbar, grid.dx)
    x, dx = grid.x, grid.dx
    V0 = (state.l - eq.l_e) ** 2
    V1 = weighted_integral(fbar**2, x, cfg.gamma1, dx)
    V2 = weighted_integral(fx**2, x, cfg.gamma2, dx)
    V3 = weighted_integral(fxx**2, x, cfg.gamma3, dx)
    h2 = V0 + float(np.sum(fbar**2 + fx**2 + fxx**2) * dx)
    return LyapunovReading(V0=V0, V1=V1, V2=V2, V3=V3, Lcomposite=combine(cfg, V0, V1, V2, V3), h2_err=h2)


def h2_error(eq: Equilibrium, grid: Grid, state: SimState) -> float:
    fbar = state.f - eq.f_pe
    fx, fxx = derivatives(fbar, grid.dx)
    return (state.l - eq.l_e) ** 2 + float(np.sum(fbar**2 + fx**2 + fxx**2) * grid.dx)


def _top_eigenvalues(lc, th, eq, A1: np.ndarray, gamma: float) -> np.ndarray:
    """Largest eigenvalue of the interface quadratic form for each A1 (closed form for 2x2)."""
    a = eq.alpha_pe
    p11 = 2 * th.theta0 + A1 * a * th.theta1**2
    p22 = -A1 * math.exp(-gamma) * a
    return 0.5 * (p11 + p22) + np.hypot(0.5 * (p11 - p22), lc.a3)


def _best_A1(lc, th, eq, gamma) -> tuple[float, float]:
    """Smallest A1 on the log grid reaching half the most negative achievable top eigenvalue."""
    lam = _top_eigenvalues(lc, th, eq, _A1_GRID, gamma)
    best = lam.min()
    if best >= 0:
        return float("nan"), float(best)
    idx = int(np.argmax(lam <= 0.5 * best))
    return float(_A1_GRID[idx]), float(lam[idx])


def _boundary_terms(eq: Equilibrium, grid: Grid, state: SimState):
    fbar = state.f - eq.f_pe
    fx, fxx = derivatives(fbar, grid.dx)
    # values at x = 1 by linear extrapolation from the last two cells
    at1 = lambda v: 1.5 * v[-1] - 0.5 * v[-2]
    return (state.l - eq.l_e) ** 2, at1(fbar) ** 2, at1(fx) ** 2, at1(fxx) ** 2


def estimate_cross_terms(
    eq: Equilibrium, grid: Grid, probe: Sequence[SimState], gamma2: float, gamma3: float, skip: float = 0.1
) -> tuple[float, float]:
    """Empirical bounds for the lower-order forcing of dV2/dt and dV3/dt.

    Returns ``(theta2, theta3)``: the largest observed ratios of
    ``dV_k/dt + beta_k V_k + delta_k (boundary derivative)^2`` to the
    lower-order boundary quantities along the probe trajectory, after skipping
    the leading ``skip`` fraction of it.
    """
    if len(probe) < 3:
        return 0.0, 0.0
    t = np.array([s.t for s in probe])
    t0 = t[0] + skip * (t[-1] - t[0])
    a = eq.alpha_pe
    unit = LyapunovConfig(1.0, gamma2, gamma3, 1.0, 1.0, 1.0)
    V2 = np.array([evaluate(unit, eq, grid, s).V2 for s in probe])
    V3 = np.array([evaluate(unit, eq, grid, s).V3 for s in probe])
    bt = np.array([_boundary_terms(eq, grid, s) for s in probe])
    dV2 = np.gradient(V2, t)
    dV3 = np.gradient(V3, t)
    keep = t >= t0
    lhs2 = dV2 + 0.5 * gamma2 * a * V2 + 0.5 * math.exp(-gamma2) * a * bt[:, 2]
    lhs3 = dV3 + 0.5 * gamma3 * a * V3 + 0.5 * math.exp(-gamma3) * a * bt[:, 3]
    den2 = bt[:, 0] + bt[:, 1]
    den3 = den2 + bt[:, 2]

    def ratio(lhs, den):
        ok = keep & (den > 1e-12 * max(den.max(), 1e-300))
        if not ok.any():
            return 0.0
        return float(max(0.0, np.max(lhs[ok] / den[ok])))

    return ratio(lhs2, den2), ratio(lhs3, den3)


def select_constants(
    lc: LinearizationConstants,
    th: ThetaConstants,
    eq: Equilibrium,
    probe: Sequence[SimState] | None = None,
    grid: Grid | None = None,
) -> LyapunovConfig:
    """Constructive choice of weights and combination coefficients.

    gamma1 is half the largest value in (0, 10] for which some A1 makes the
    2x2 interface/boundary quadratic form negative definite; A1 is then the
    smallest grid value reaching half the best achievable top eigenvalue.
    A2 and A3 double from 1 until they dominate the cross-terms measured on
    ``probe`` (kept at 1 when no probe is given).
    """
    if th.theta0 >= 0:
        raise ConstantSelectionError(f"theta0={th.theta0!r} >= 0: the interface quadratic form cannot be negative definite")

    def feasible(gamma):
        return _best_A1(lc, th, eq, gamma)[1] < 0

    if not feasible(1e-9):
        raise ConstantSelectionError("no A1 renders the interface quadratic form negative definite")
    if feasible(GAMMA_MAX):
        g_star = GAMMA_MAX
    else:
        lo, hi = 1e-9, GAMMA_MAX
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if feasible(mid) else (lo, mid)
        g_star = lo
    gamma1 = 0.5 * g_star
    A1, lam = _best_A1(lc, th, eq, gamma1)
    assert lam < 0 and np.all(np.linalg.eigvalsh(interface_form_matrix(lc, th, eq, A1, gamma1)) < 0)
    gamma2 = gamma3 = gamma1

    A2 = A3 = 1.0
    theta2 = theta3 = 0.0
    if probe is not None and grid is not None:
        theta2, theta3 = estimate_cross_terms(eq, grid, probe, gamma2, gamma3)
        beta01 = -lam
        delta2 = 0.5 * math.exp(-gamma2) * eq.alpha_pe
        while A2 * beta01 <= 2 * theta2:
            A2 *= 2
            if A2 > A_CAP:
                raise ConstantSelectionError(f"A2 exceeded cap 2^30 (theta2~{theta2:.3g})")
        while A3 * min(delta2, A2 * beta01 - theta2) <= 2 * theta3:
            A3 *= 2
            if A3 > A_CAP:
                raise ConstantSelectionError(f"A3 exceeded cap 2^30 (theta3~{theta3:.3g})")
    return LyapunovConfig(
        gamma1=gamma1,
        gamma2=gamma2,
        gamma3=gamma3,
        A1=A1,
        A2=A2,
        A3=A3,
        form_lambda_max=lam,
        theta2_hat=theta2,
        theta3_hat=theta3,
    )


def fit_decay(times: Sequence[float], values: Sequence[float], transient_skip: float = 0.1) -> DecayFit:
    """Least-squares fit of log(values) against time after the transient.

    ``Mconst`` is normalized by the first value of the series. The window is
    truncated at the first non-positive value.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size == 0:
        return DecayFit(omega=float("nan"), Mconst=float("nan"), window=(math.nan, math.nan), r2=float("nan"), n_samples=0)
    t_start = t[0] + transient_skip * (t[-1] - t[0])
    idx = np.nonzero(t >= t_start)[0]
    start = int(idx[0]) if idx.size else t.size
    stop = start
    while stop < t.size and v[stop] > 0:
        stop += 1
    tw, vw = t[start:stop], v[start:stop]
    if tw.size < 2:
        return DecayFit(omega=float("nan"), Mconst=float("nan"), window=(t_start, t_start), r2=float("nan"), n_samples=int(tw.size))
    res = stats.linregress(tw, np.log(vw))
    r2 = float(res.rvalue**2) if np.isfinite(res.rvalue) else 1.0
    return DecayFit(
        omega=float(-res.slope),
        Mconst=float(math.exp(res.intercept) / v[0]) if v[0] > 0 else float("nan"),
        window=(float(tw[0]), float(tw[-1])),
        r2=r2,
        n_samples=int(tw.size),
    )


def monotonicity_report(values: Sequence[float], tolerance: float = 1e-8) -> list[int]:
    """Indices ``i`` where ``values[i]`` exceeds ``values[i-1]`` beyond the relative tolerance."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two samples")
    inc = v[1:] - v[:-1]
    bound = tolerance * np.maximum(v[1:], v[:-1])
    return [int(i) + 1 for i in np.nonzero(inc > bound)[0]]


def estimate_basin(converges: Callable[[float], bool], lo: float, hi: float, iters: int = 12) -> float:
    """Bisection for the largest perturbation amplitude that still converges.

    ``converges(lo)`` must hold. This is an empirical stand-in for the existential
    basin size; it carries no guarantee.
    """
    if not converges(lo):
        raise ValueError(f"amplitude {lo!r} does not converge")
    if converges(hi):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if converges(mid) else (lo, mid)
    return lo


@dataclass(frozen=True)
class ConvergenceReport:
    l_error: float
    h2_shrink: float
    fit: DecayFit
    violations: tuple[int, ...]
    completed: bool

    @property
    def converged(self) -> bool:
        return (
            self.completed
            and self.l_error < 0.01
            and self.h2_shrink >= 100
            and self.fit.valid
            and self.fit.omega > 0
            and not self.violations
        )


def assess_convergence(
    times: Sequence[float],
    l: Sequence[float],
    h2: Sequence[float],
    L: Sequence[float],
    l_e: float,
    completed: bool = True,
    skip: float = 0.1,
    tolerance: float = 1e-8,
) -> ConvergenceReport:
    """Apply the exponential-convergence thresholds to a sampled run.

    ``l_error`` is relative to ``l_e``; monotonicity of ``L`` is checked only
    after the leading ``skip`` fraction of the time span.
    """
    t = np.asarray(times, dtype=float)
    Lv = np.asarray(L, dtype=float)
    h2v = np.asarray(h2, dtype=float)
    fit = fit_decay(t, Lv, skip)
    if t.size == 0:
        # faulted before the first sample
        return ConvergenceReport(l_error=math.inf, h2_shrink=math.nan, fit=fit, violations=(), completed=False)
    start = int(np.searchsorted(t, t[0] + skip * (t[-1] - t[0])))
    tail = Lv[start:]
    violations = tuple(i + start for i in monotonicity_report(tail, tolerance)) if tail.size >= 2 else ()
    shrink = float(h2v[0] / h2v[-1]) if h2v[-1] > 0 else math.inf
    return ConvergenceReport(
        l_error=float(abs(l[-1] - l_e) / l_e),
        h2_shrink=shrink,
        fit=fit,
        violations=violations,
        completed=completed,
    )
