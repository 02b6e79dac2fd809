"""Physical parameters, equilibria and pointwise model functions.

All lengths are in metres, the screw speed ``N`` in rev/s and pressures in Pa.
The partially filled zone is mapped onto the normalized coordinate ``x`` in
``[0, 1]``; the interface ``l`` is the PFZ/FFZ boundary in physical units.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)

SINGULAR_FILL_TOL = 1e-9
LOOP_DEGENERACY_TOL = 1e-9
EQUILIBRIUM_ORACLE_TOL = 1e-12


class ModelError(ValueError):
    """Base class for violations of the model's validity domain."""


class DomainError(ModelError):
    pass


class SingularityError(ModelError):
    """Raised when the filling ratio at the interface reaches 1."""


class LoopDegeneracyError(ModelError):
    pass


class ActuationError(ModelError):
    pass


class InfeasibleEquilibriumError(ModelError):
    pass


@dataclass(frozen=True)
class PhysicalParams:
    L: float
    B: float
    K_d: float
    zeta: float
    eta: float
    rho0: float
    S_eff: float
    V_eff: float | None = None

    def __post_init__(self):
        if self.V_eff is None:
            object.__setattr__(self, "V_eff", self.zeta * self.S_eff)
        for name in ("L", "B", "K_d", "zeta", "eta", "rho0", "S_eff", "V_eff"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"PhysicalParams.{name} must be finite and > 0, got {value!r}")
        expected = self.zeta * self.S_eff
        if abs(self.V_eff - expected) > 1e-12 * expected:
            raise ValueError(
                f"V_eff={self.V_eff!r} inconsistent with zeta*S_eff={expected!r}"
            )

    @classmethod
    def reference(cls) -> "PhysicalParams":
        """Single-screw food extruder used in the reference experiment."""
        return cls(L=2.0, B=2.4e-6, K_d=2.4e-3, zeta=0.003, eta=125.0, rho0=350.0, S_eff=0.014)

    @property
    def mass_per_rev(self) -> float:
        """rho0 * V_eff, mass conveyed per screw revolution at full fill."""
        return self.rho0 * self.V_eff


@dataclass(frozen=True)
class Equilibrium:
    l_e: float
    f_pe: float
    N_e: float
    dP_e: float
    alpha_pe: float
    F_ine: float


@dataclass(frozen=True)
class Gains:
    k1: float
    k2: float

    def __post_init__(self):
        if not (math.isfinite(self.k1) and math.isfinite(self.k2)):
            raise ValueError(f"gains must be finite, got k1={self.k1!r}, k2={self.k2!r}")


@dataclass(frozen=True)
class Actuation:
    N: float
    F_in: float
    dP: float


def _check_interface(p: PhysicalParams, l: float, allow_L: bool = False) -> None:
    if not (l > 0 and (l <= p.L if allow_L else l < p.L)):
        raise DomainError(f"interface position l={l!r} outside (0, {p.L})")


def pressure_coefficient(p: PhysicalParams, l: float) -> float:
    """c(l) with die_pressure = c(l) * N, i.e. the partial of pressure in N."""
    u = p.L - l
    return p.eta * p.rho0 * p.V_eff * u / (p.B * p.rho0 + p.K_d * u)


def pressure_slope(p: PhysicalParams, N: float, l: float) -> float:
    """Partial derivative of die_pressure with respect to l."""
    u = p.L - l
    denom = p.B * p.rho0 + p.K_d * u
    return -p.eta * p.rho0 * p.V_eff * N * p.B * p.rho0 / denom**2


def die_pressure(p: PhysicalParams, N: float, l: float) -> float:
    _check_interface(p, l, allow_L=True)
    if N < 0:
        raise DomainError(f"screw speed N={N!r} must be >= 0")
    return pressure_coefficient(p, l) * N


def interface_rhs(p: PhysicalParams, l: float, N: float, f1: float, dP: float) -> float:
    """Interface velocity from the total mass balance."""
    _check_interface(p, l)
    gap = 1.0 - f1
    if abs(gap) < SINGULAR_FILL_TOL:
        raise SingularityError(f"filling ratio at the interface f1={f1!r} is 1: bi-zone model degenerates")
    return (p.K_d / p.eta * dP - p.rho0 * p.V_eff * N * f1) / (p.rho0 * p.S_eff * gap)


def transport_velocity(p: PhysicalParams, x, l: float, N: float, ldot: float):
    """PFZ transport speed in normalized coordinates, affine in ``x``.

    Accepts scalar or array ``x``. A non-positive speed at ``x = 1`` means the
    interface no longer acts as an outflow boundary; this is logged, not raised.
    """
    if not l > 0:
        raise DomainError(f"interface position l={l!r} must be > 0")
    alpha = (p.zeta * N - np.asarray(x, dtype=float) * ldot) / l
    if outflow_degenerate(p, l, N, ldot):
        logger.debug("transport speed at the interface is non-positive (l=%g, N=%g, ldot=%g)", l, N, ldot)
    return float(alpha) if np.ndim(alpha) == 0 else alpha


def outflow_degenerate(p: PhysicalParams, l: float, N: float, ldot: float) -> bool:
    return (p.zeta * N - ldot) / l <= 0


def inflow_ratio(p: PhysicalParams, F_in: float, N: float) -> float:
    if not N > 0:
        raise DomainError(f"screw speed N={N!r} must be > 0")
    ratio = F_in / (p.rho0 * p.V_eff * N)
    if not 0 <= ratio <= 1:
        logger.warning("inflow filling ratio %g outside [0, 1]", ratio)
    return ratio


def resolve_closed_loop(p: PhysicalParams, eq: Equilibrium, g: Gains, l: float) -> Actuation:
    """Solve the algebraic loop between the pressure feedback and the die pressure.

    The die pressure is linear in N, so ``dP = c(l) N`` together with
    ``N = N_e + k1 (dP - dP_e)`` has the closed-form fixed point used here.
    """
    _check_interface(p, l)
    c = pressure_coefficient(p, l)
    loop = 1.0 - g.k1 * c
    if abs(loop) < LOOP_DEGENERACY_TOL:
        raise LoopDegeneracyError(f"1 - k1*c(l) = {loop!r} at l={l!r}: feedback loop is singular")
    dP = c * (eq.N_e - g.k1 * eq.dP_e) / loop
    dP_bar = dP - eq.dP_e
    N = eq.N_e + g.k1 * dP_bar
    F_in = eq.F_ine + g.k2 * dP_bar
    if not N > 0:
        raise ActuationError(f"closed-loop screw speed N={N!r} is not positive (l={l!r})")
    if F_in < 0:
        raise ActuationError(f"closed-loop inlet flow F_in={F_in!r} is negative (l={l!r})")
    return Actuation(N=N, F_in=F_in, dP=dP)


def equilibrium_residual(p: PhysicalParams, l: float, N: float, f: float) -> float:
    """Interface velocity with the die pressure tied to (N, l)."""
    return interface_rhs(p, l, N, f, die_pressure(p, N, l))


def _bisect_interface(p: PhysicalParams, f_pe: float, N_e: float) -> float:
    lo, hi = 1e-12 * p.L, p.L * (1 - 1e-15)
    return optimize.bisect(
        lambda l: equilibrium_residual(p, l, N_e, f_pe), lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=400
    )


def equilibrium_from_fill(p: PhysicalParams, f_pe: float, N_e: float) -> Equilibrium:
    """Equilibrium with filling ratio ``f_pe`` at screw speed ``N_e``.

    ``N_e`` cancels from the zero-velocity condition, so the interface setpoint
    depends only on ``f_pe``. The closed form is cross-checked by bisection.
    """
    if not 0 < f_pe < 1:
        raise ValueError(f"f_pe={f_pe!r} must lie in (0, 1)")
    if not N_e > 0:
        raise ValueError(f"N_e={N_e!r} must be > 0")
    l_e = p.L - f_pe * p.B * p.rho0 / (p.K_d * (1 - f_pe))
    if not 0 < l_e < p.L:
        raise InfeasibleEquilibriumError(
            f"f_pe={f_pe!r} gives l_e={l_e!r} outside (0, {p.L}); the FFZ would exceed the barrel"
        )
    l_bis = _bisect_interface(p, f_pe, N_e)
    if abs(l_bis - l_e) > EQUILIBRIUM_ORACLE_TOL * p.L:
        raise RuntimeError(f"closed-form l_e={l_e!r} disagrees with bisection {l_bis!r}")
    return Equilibrium(
        l_e=l_e,
        f_pe=f_pe,
        N_e=N_e,
        dP_e=die_pressure(p, N_e, l_e),
        alpha_pe=p.zeta * N_e / l_e,
        F_ine=p.rho0 * p.V_eff * N_e * f_pe,
    )


def validate_equilibrium(p: PhysicalParams, eq: Equilibrium, tol: float = 1e-10) -> None:
    """Check a user-supplied equilibrium tuple against its defining relations."""
    if not 0 < eq.l_e < p.L:
        raise ValueError(f"l_e={eq.l_e!r} outside (0, {p.L})")
    if not 0 < eq.f_pe < 1:
        raise ValueError(f"f_pe={eq.f_pe!r} outside (0, 1)")
    if not eq.N_e > 0:
        raise ValueError(f"N_e={eq.N_e!r} must be > 0")
    # residual normalized by rho0*S_eff is the interface velocity itself
    residual = equilibrium_residual(p, eq.l_e, eq.N_e, eq.f_pe)
    if abs(residual) > tol:
        raise ValueError(f"equilibrium is not stationary: interface velocity {residual!r}")
    checks = {
        "dP_e": (eq.dP_e, die_pressure(p, eq.N_e, eq.l_e)),
        "alpha_pe": (eq.alpha_pe, p.zeta * eq.N_e / eq.l_e),
        "F_ine": (eq.F_ine, p.rho0 * p.V_eff * eq.N_e * eq.f_pe),
    }
    for name, (got, want) in checks.items():
        if abs(got - want) > 1e-12 * max(1.0, abs(want)):
            raise ValueError(f"{name}={got!r} inconsistent with its definition ({want!r})")
