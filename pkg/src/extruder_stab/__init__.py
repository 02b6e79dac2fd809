"""Simulation and gain synthesis for the isothermal bi-zone extruder mass-balance model."""

from .model import (
    Actuation,
    Equilibrium,
    Gains,
    PhysicalParams,
    die_pressure,
    equilibrium_from_fill,
    inflow_ratio,
    interface_rhs,
    resolve_closed_loop,
    transport_velocity,
)

__all__ = [
    "Actuation",
    "Equilibrium",
    "Gains",
    "PhysicalParams",
    "die_pressure",
    "equilibrium_from_fill",
    "inflow_ratio",
    "interface_rhs",
    "resolve_closed_loop",
    "transport_velocity",
]
