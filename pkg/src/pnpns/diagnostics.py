"""Scalar functionals of a solver state.

The energy bookkeeping splits into four nonnegative-or-signed parts:

    entropy_part        = <n (ln n - 1) + p (ln p - 1), 1>_C
    potential_part      = 1/2 ||n - p||_{-1,h}^2
    kinetic_part        = 1/2 ||u||_2^2
    pressure_correction = (tau^2 / 8) ||grad_h psi||_2^2

with the running sums ``e_h`` (entropy + potential), ``e_total`` (adds
kinetic) and ``e_modified`` (adds the pressure correction).  The time
stepper dissipates ``e_modified``; the others are recorded for reporting.
Everything here is recomputed from the stored fields each time rather than
accumulated across steps, so monotonicity checks are self-contained.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .elliptic import PoissonContext, inv_neg_laplace, norm_minus1
from .errors import DomainError, PreconditionError
from .grid import CellField, grad_norm_sq, ip_vec, mean
from .scheme import SchemeState

__all__ = [
    "EnergyBreakdown",
    "TimeSeriesRow",
    "energies",
    "electric_potential",
    "min_concentration",
]


@dataclasses.dataclass(frozen=True)
class EnergyBreakdown:
    """The four energy parts; the sums are derived properties."""

    entropy_part: float
    potential_part: float
    kinetic_part: float
    pressure_correction: float

    def __post_init__(self):
        for name in ("potential_part", "kinetic_part", "pressure_correction"):
            if getattr(self, name) < 0:
                raise PreconditionError(f"{name} must be >= 0, got "
                                        f"{getattr(self, name)!r}")

    @property
    def e_h(self) -> float:
        return self.entropy_part + self.potential_part

    @property
    def e_total(self) -> float:
        return self.e_h + self.kinetic_part

    @property
    def e_modified(self) -> float:
        return self.e_total + self.pressure_correction


@dataclasses.dataclass(frozen=True)
class TimeSeriesRow:
    """One accepted step's worth of scalar telemetry.

    The CSV rendering of these fields (column order, float formatting) is
    owned by the run driver.
    """

    step: int
    time: float
    e_h: float
    e_total: float
    e_modified: float
    mass_n: float
    mass_p: float
    min_n: float
    min_p: float
    div_u_inf: float
    nonlinear_iters: int


def _demand_positive(who: str, *fields: CellField):
    for f in fields:
        low = float(np.min(f.values))
        if low <= 0.0:
            raise DomainError(f"{who} needs strictly positive "
                              f"concentrations, min is {low!r}")


def energies(state: SchemeState, tau: float,
             ctx: PoissonContext | None = None) -> EnergyBreakdown:
    """Energy breakdown of ``state`` for step size ``tau``.

    The potential part evaluates the H^{-1}-type norm of n - p after
    removing its mean; for a valid state the species carry equal mass so
    only roundoff is removed.
    """
    grid = state.grid
    if ctx is None:
        ctx = PoissonContext(grid)
    _demand_positive("energies", state.n_curr, state.p_curr)
    nv, pv = state.n_curr.values, state.p_curr.values
    entropy = grid.h ** 2 * float(np.sum(nv * (np.log(nv) - 1.0)
                                         + pv * (np.log(pv) - 1.0)))
    diff = nv - pv
    diff = diff - diff.mean()
    potential = 0.5 * norm_minus1(ctx, CellField(grid, diff)) ** 2
    kinetic = 0.5 * ip_vec(state.u_curr, state.u_curr)
    correction = (tau ** 2 / 8.0) * grad_norm_sq(state.psi_curr)
    return EnergyBreakdown(entropy_part=entropy, potential_part=potential,
                           kinetic_part=kinetic,
                           pressure_correction=correction)


def electric_potential(state: SchemeState,
                       ctx: PoissonContext | None = None) -> CellField:
    """Mean-zero potential ``phi`` solving ``-lap phi = p - n``."""
    grid = state.grid
    if ctx is None:
        ctx = PoissonContext(grid)
    gap = abs(mean(state.p_curr) - mean(state.n_curr))
    if gap > 1e-10:
        raise PreconditionError(
            f"species means differ by {gap!r}; the potential problem is "
            "only solvable for equal masses")
    diff = state.p_curr.values - state.n_curr.values
    diff = diff - diff.mean()
    return inv_neg_laplace(ctx, CellField(grid, diff))


def min_concentration(state: SchemeState) -> tuple[float, float, float]:
    """Pointwise minima ``(min n, min p, min of both)``."""
    low_n = float(np.min(state.n_curr.values))
    low_p = float(np.min(state.p_curr.values))
    return low_n, low_p, min(low_n, low_p)
