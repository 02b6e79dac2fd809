from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Actuation

MIN_CELLS = 16


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on the normalized PFZ coordinate [0, 1]."""

    M: int
    x: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.M) != self.M or self.M < MIN_CELLS:
            raise ValueError(f"grid needs an integer M >= {MIN_CELLS}, got {self.M!r}")
        x = (np.arange(self.M) + 0.5) / self.M
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def dx(self) -> float:
        return 1.0 / self.M


@dataclass(frozen=True)
class SimState:
    t: float
    l: float
    f: np.ndarray
    act: Actuation | None = None

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.l], self.f))
