"""Exception hierarchy shared by all solver modules.

Every failure the library raises deliberately derives from :class:`PnpnsError`,
so callers can distinguish "the solver told me something is wrong" from a plain
programming bug.  The CLI maps the three broad families onto exit codes:
configuration problems (2), solver failures (3), and post-step invariant
violations (4).
"""


class PnpnsError(Exception):
    """Base class for all deliberate errors raised by this package."""


class GridMismatchError(PnpnsError, ValueError):
    """Operands live on different grids or wrong field families."""


class DomainError(PnpnsError, ValueError):
    """A quantity left its mathematical domain (e.g. log of a nonpositive
    concentration)."""


class PreconditionError(PnpnsError, ValueError):
    """A documented call precondition was violated (e.g. a grossly
    non-mean-zero right-hand side for the periodic Poisson inverse)."""


class ConfigError(PnpnsError, ValueError):
    """Invalid or contradictory run configuration."""


class SolverFailure(PnpnsError, RuntimeError):
    """Base class for runtime solver breakdowns (exit code 3)."""


class ConvergenceError(SolverFailure):
    """An iterative solve exhausted its budget.

    Attributes
    ----------
    residual : float
        Final residual norm when the budget ran out.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class DivergenceError(SolverFailure):
    """Non-finite values appeared during a solve."""


class StepError(SolverFailure):
    """A time step could not be completed.

    Carries the partial :class:`~pnpns.scheme.StepReport` (when available)
    under ``report`` for post-mortem inspection.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class InvariantError(PnpnsError, RuntimeError):
    """A structural invariant (mass, positivity, incompressibility, pressure
    gauge) failed *after* an otherwise successful step (exit code 4)."""
