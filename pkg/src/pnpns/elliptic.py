"""Linear solvers on the periodic staggered grid.

Four solves drive the time stepper:

* ``inv_neg_laplace`` -- the spectral inverse of the periodic five-point
  Laplacian on mean-zero cell fields (used by the H^{-1}-type chemical
  potential term, the electric potential, and the pressure Poisson solve);
* ``solve_velocity`` -- the Helmholtz-type convection-diffusion solve
  ``(2/tau) v + b(u~, v) - Lap v = rhs`` by a preconditioned nonsymmetric
  Krylov iteration;
* ``solve_ion`` -- the positivity-weighted ion solve
  ``(1/tau) x - div(m grad(d*x)) = rhs``, symmetrized by ``y = d*x`` and
  solved with conjugate gradients;
* ``pressure_project`` -- the projection substep enforcing discrete
  incompressibility.

The periodic Laplacian is diagonal in the discrete Fourier basis with
eigenvalues ``lambda_{k,l} = (4/h^2)(sin^2(pi k/N) + sin^2(pi l/N))`` on every
one of the three field families, so both the exact inverse and the
constant-coefficient preconditioners are one real FFT round-trip.

All residual contracts are stated in the grid-weighted l2 norm
(``h``-weighted, matching the discrete inner products):
``||rhs - A x||_2 <= rel_tolerance * ||rhs||_2 + abs_tolerance``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, gmres

from .errors import ConvergenceError, DivergenceError, PreconditionError
from .grid import (
    CellField,
    EdgeFieldX,
    EdgeFieldY,
    GridSpec,
    MacVelocity,
    convect,
    div_mac,
    grad_cell,
    ip_c,
    laplace_mac,
    mean,
    norm_inf,
)

__all__ = [
    "KrylovConfig",
    "KrylovCounter",
    "PoissonContext",
    "inv_neg_laplace",
    "norm_minus1",
    "solve_velocity",
    "solve_ion",
    "pressure_project",
    "project_solenoidal",
]

# Mean-zero preconditions tolerate round-off-level inputs: a field that is
# zero up to machine noise (e.g. the divergence of an already projected
# velocity) must not trip the relative check, so a small absolute floor is
# allowed on top of the relative one.
_MEAN_ABS_FLOOR = 1e-13


@dataclass(frozen=True)
class KrylovConfig:
    """Tolerances for the iterative solves.

    The defaults sit one order below the nonlinear iteration tolerance so
    that inner-solver error never shows up in the outer convergence test.
    """

    rel_tolerance: float = 1e-11
    abs_tolerance: float = 1e-13
    max_iterations: int = 500

    def __post_init__(self):
        if self.rel_tolerance <= 0 or self.abs_tolerance <= 0:
            raise ValueError("Krylov tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class KrylovCounter:
    """Mutable tally of operator applications across solves."""

    iterations: int = 0


class PoissonContext:
    """Reusable spectral workspace for one grid.

    Holds the ``N x N`` eigenvalue table of ``-Delta_h`` (identical on all
    three field families of a periodic grid) plus its pseudo-inverse with the
    zero mode pinned to zero.  Immutable after construction; safe to share.
    """

    def __init__(self, grid: GridSpec):
        self.grid = grid
        n, h = grid.n, grid.h
        s2 = np.sin(np.pi * np.arange(n) / n) ** 2
        self.eigenvalues = (4.0 / h**2) * (s2[:, None] + s2[None, :])
        # table in the layout of rfft2 (full frequencies along x, half along y)
        self._lam_r = self.eigenvalues[:, : n // 2 + 1].copy()
        inv = np.zeros_like(self._lam_r)
        nonzero = self._lam_r > 0
        inv[nonzero] = 1.0 / self._lam_r[nonzero]
        self._inv_lam_r = inv

    def apply_inverse(self, values: np.ndarray) -> np.ndarray:
        """(-Delta_h)^{-1} with the zero mode projected out (raw arrays)."""
        spec = np.fft.rfft2(values)
        spec *= self._inv_lam_r
        return np.fft.irfft2(spec, s=values.shape)

    def solve_shifted(self, alpha: float, values: np.ndarray) -> np.ndarray:
        """Exact solve of ``(alpha - Delta_h) g = values`` for ``alpha > 0``,
        valid on any field family (shared eigenvalues)."""
        spec = np.fft.rfft2(values)
        spec /= (alpha + self._lam_r)
        return np.fft.irfft2(spec, s=values.shape)


def _check_mean_zero(f: CellField, who: str):
    m = mean(f)
    if abs(m) > max(1e-10 * norm_inf(f), _MEAN_ABS_FLOOR):
        raise PreconditionError(
            f"{who} requires a mean-zero field; got mean {m:.3e} "
            f"(sup-norm {norm_inf(f):.3e})")


def inv_neg_laplace(ctx: PoissonContext, f: CellField) -> CellField:
    """Mean-zero solution ``g`` of ``-Delta_h g = f - mean(f)``.

    The input must already be mean-zero up to round-off; callers subtract
    the mean first when their data has one.
    """
    if f.grid != ctx.grid:
        raise PreconditionError("field grid does not match PoissonContext grid")
    _check_mean_zero(f, "inv_neg_laplace")
    return CellField(f.grid, ctx.apply_inverse(f.values))


def norm_minus1(ctx: PoissonContext, f: CellField) -> float:
    """Discrete H^{-1}-type norm ``sqrt(<f, (-Delta_h)^{-1} f>_C)`` of a
    mean-zero cell field."""
    g = inv_neg_laplace(ctx, f)
    return max(ip_c(f, g), 0.0) ** 0.5


# --------------------------------------------------------------------------
# velocity solve
# --------------------------------------------------------------------------

def _pack(v: MacVelocity) -> np.ndarray:
    return np.concatenate([v.x.values.ravel(), v.y.values.ravel()])


def _unpack(grid: GridSpec, flat: np.ndarray) -> MacVelocity:
    nn = grid.n * grid.n
    return MacVelocity(EdgeFieldX(grid, flat[:nn].reshape(grid.n, grid.n)),
                       EdgeFieldY(grid, flat[nn:].reshape(grid.n, grid.n)))


def solve_velocity(ctx: PoissonContext, u_tilde: MacVelocity, tau: float,
                   rhs: MacVelocity, cfg: KrylovConfig,
                   counter: KrylovCounter | None = None) -> MacVelocity:
    """Solve ``(2/tau) v + b(u_tilde, v) - Delta_h v = rhs``.

    The operator is positive definite (the convection form is
    skew-symmetric), but not symmetric, so a restarted GMRES iteration is
    used, preconditioned by the exact spectral inverse of the
    constant-coefficient part ``(2/tau) - Delta_h``.  Since the
    preconditioned residual that GMRES monitors can understate the true one,
    the true residual is checked after each solve and the tolerance is
    tightened geometrically until the contract holds.
    """
    if tau <= 0:
        raise PreconditionError(f"tau must be positive, got {tau}")
    grid = rhs.grid
    if u_tilde.grid != grid or ctx.grid != grid:
        raise PreconditionError("velocity solve operands on mismatched grids")
    h = grid.h
    two_over_tau = 2.0 / tau
    ndof = 2 * grid.n * grid.n

    def apply_op(flat: np.ndarray) -> np.ndarray:
        if counter is not None:
            counter.iterations += 1
        v = _unpack(grid, flat)
        out = two_over_tau * v + convect(u_tilde, v) - laplace_mac(v)
        return _pack(out)

    def apply_prec(flat: np.ndarray) -> np.ndarray:
        v = _unpack(grid, flat)
        return np.concatenate([
            ctx.solve_shifted(two_over_tau, v.x.values).ravel(),
            ctx.solve_shifted(two_over_tau, v.y.values).ravel(),
        ])

    b = _pack(rhs)
    if not np.all(np.isfinite(b)):
        raise DivergenceError("velocity solve received a non-finite right-hand side")
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return MacVelocity.zeros(grid)
    # contract in vector-norm units (grid l2 = h * vector l2 in 2-D)
    target = cfg.rel_tolerance * b_norm + cfg.abs_tolerance / h

    op = LinearOperator((ndof, ndof), matvec=apply_op)
    prec = LinearOperator((ndof, ndof), matvec=apply_prec)
    restart = max(1, min(50, ndof, cfg.max_iterations))
    outer = max(1, cfg.max_iterations // restart + 1)

    x = np.zeros(ndof)
    rtol = cfg.rel_tolerance * 0.1
    residual = float("inf")
    for _ in range(4):
        x, _ = gmres(op, b, x0=x, rtol=rtol, atol=0.2 * target, M=prec,
                     restart=restart, maxiter=outer)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("velocity solve produced non-finite values")
        residual = float(np.linalg.norm(b - apply_op(x)))
        if residual <= target:
            return _unpack(grid, x)
        rtol *= 1e-2
    raise ConvergenceError(
        f"velocity solve stalled: residual {residual * h:.3e} above contract "
        f"{target * h:.3e} (grid norm)", residual=residual * h)


# --------------------------------------------------------------------------
# ion solve
# --------------------------------------------------------------------------

def solve_ion(ctx: PoissonContext, m_edge_x: EdgeFieldX, m_edge_y: EdgeFieldY,
              d: CellField, tau: float, rhs: CellField, cfg: KrylovConfig,
              counter: KrylovCounter | None = None) -> CellField:
    """Solve ``(1/tau) x - div_h(m grad_h(d * x)) = rhs`` for a cell field.

    ``m`` is the (strictly positive) edge mobility pair and ``d`` a strictly
    positive cell diagonal.  The substitution ``y = d * x`` turns the system
    into the symmetric positive definite form
    ``(1/tau) y / d - div_h(m grad_h y) = rhs``, solved with conjugate
    gradients under a constant-coefficient spectral preconditioner.
    """
    if tau <= 0:
        raise PreconditionError(f"tau must be positive, got {tau}")
    grid = rhs.grid
    mx, my = m_edge_x.values, m_edge_y.values
    dv = d.values
    if np.min(mx) <= 0 or np.min(my) <= 0:
        raise PreconditionError(
            f"edge mobilities must be strictly positive (min "
            f"{min(np.min(mx), np.min(my)):.3e})")
    if np.min(dv) <= 0:
        raise PreconditionError(
            f"ion-solve diagonal must be strictly positive (min {np.min(dv):.3e})")

    h = grid.h
    inv_tau_d = 1.0 / (tau * dv)

    def apply_spd(flat: np.ndarray) -> np.ndarray:
        if counter is not None:
            counter.iterations += 1
        y = flat.reshape(grid.n, grid.n)
        gx = (y - np.roll(y, 1, axis=0)) / h
        gy = (y - np.roll(y, 1, axis=1)) / h
        div = (np.roll(mx * gx, -1, axis=0) - mx * gx) / h \
            + (np.roll(my * gy, -1, axis=1) - my * gy) / h
        return (inv_tau_d * y - div).ravel()

    mbar = 0.5 * float(np.mean(mx) + np.mean(my))
    alpha = float(np.mean(inv_tau_d))

    def apply_prec(flat: np.ndarray) -> np.ndarray:
        y = flat.reshape(grid.n, grid.n)
        return (ctx.solve_shifted(alpha / mbar, y) / mbar).ravel()

    b = rhs.values.ravel()
    if not np.all(np.isfinite(b)):
        raise DivergenceError("ion solve received a non-finite right-hand side")
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CellField.zeros(grid)
    target = cfg.rel_tolerance * b_norm + cfg.abs_tolerance / h

    nn = grid.n * grid.n
    op = LinearOperator((nn, nn), matvec=apply_spd)
    prec = LinearOperator((nn, nn), matvec=apply_prec)

    y = np.zeros(nn)
    rtol = cfg.rel_tolerance * 0.1
    residual = float("inf")
    for _ in range(4):
        y, _ = cg(op, b, x0=y, rtol=rtol, atol=0.2 * target, M=prec,
                  maxiter=cfg.max_iterations)
        if not np.all(np.isfinite(y)):
            raise DivergenceError("ion solve produced non-finite values")
        residual = float(np.linalg.norm(b - apply_spd(y)))
        if residual <= target:
            return CellField(grid, y.reshape(grid.n, grid.n) / dv)
        rtol *= 1e-2
    raise ConvergenceError(
        f"ion solve stalled: residual {residual * h:.3e} above contract "
        f"{target * h:.3e} (grid norm)", residual=residual * h)


# --------------------------------------------------------------------------
# pressure projection
# --------------------------------------------------------------------------

def pressure_project(ctx: PoissonContext, u_hat: MacVelocity,
                     psi_old: CellField, tau: float
                     ) -> tuple[MacVelocity, CellField]:
    """Projection substep: remove the discrete-gradient part of ``u_hat``.

    Solves ``-Delta_h q = -(2/tau) div_h(u_hat)`` for the mean-zero pressure
    increment ``q`` and returns ``u_new = u_hat - (tau/2) grad_h q`` together
    with the updated mean-zero pressure ``psi_old + q``.
    """
    if tau <= 0:
        raise PreconditionError(f"tau must be positive, got {tau}")
    div = div_mac(u_hat)
    q = inv_neg_laplace(ctx, CellField(div.grid, (-2.0 / tau) * div.values))
    u_new = u_hat - (tau / 2.0) * grad_cell(q)
    psi_new = psi_old + q
    psi_new = CellField(psi_new.grid, psi_new.values - mean(psi_new))
    return u_new, psi_new


def project_solenoidal(ctx: PoissonContext, u: MacVelocity) -> MacVelocity:
    """Tau-independent discrete Helmholtz projection onto divergence-free
    fields (used to prepare initial data)."""
    q0 = inv_neg_laplace(ctx, div_mac(u))
    return u + grad_cell(q0)
