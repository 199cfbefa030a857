"""Second-order, positivity-preserving, energy-stable MAC finite-difference
solver for the two-species Poisson--Nernst--Planck--Navier--Stokes system on a
periodic square, with diagnostics and a Cauchy-error convergence harness.

Layout
------
``grid``
    Staggered-grid field containers, discrete operators, inner products,
    norms, and grid-transfer utilities (the conventions live here).
``elliptic``
    Spectral inverse of the periodic Laplacian, the Krylov velocity and ion
    solves, and the pressure projection.
``scheme``
    The time stepper: extrapolations, regularized mobilities, logarithmic
    chemical potentials, the linearized nonlinear iteration with positivity
    damping, the projection substep, and the first-step bootstrap.
``diagnostics``
    Energies, masses, extrema, electric potential, time-series rows.
``harness``
    Run configuration, the simulation driver with CSV telemetry, and the
    convergence study.
``cli``
    The ``pnpns`` command-line entry point.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    GridMismatchError,
    InvariantError,
    PnpnsError,
    PreconditionError,
    SolverFailure,
    StepError,
)
from .grid import CellField, EdgeFieldX, EdgeFieldY, GridSpec, MacVelocity

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "CellField",
    "EdgeFieldX",
    "EdgeFieldY",
    "MacVelocity",
    "PnpnsError",
    "GridMismatchError",
    "DomainError",
    "PreconditionError",
    "ConfigError",
    "SolverFailure",
    "ConvergenceError",
    "DivergenceError",
    "StepError",
    "InvariantError",
    "__version__",
]
