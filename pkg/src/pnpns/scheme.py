"""Second-order time stepper for the coupled ion-transport /
incompressible-flow system.

The state holds two positive cell-centered concentrations ``n`` and ``p``, a
staggered solenoidal velocity ``u``, and a mean-zero cell-centered pressure
variable ``psi``, at two consecutive time levels.  One step from level ``m``
to ``m + 1`` solves the coupled system

    (2/tau)(u_half - u^m) + b(u_tilde, u_half) - lap_h u_half
        = -grad_h psi^m - (A_h p_tilde) grad_h mu_p - (A_h n_tilde) grad_h mu_n,
    (n^{m+1} - n^m)/tau + div_h(A_h n_tilde u_half) = div_h(n_breve grad_h mu_n),
    (p^{m+1} - p^m)/tau + div_h(A_h p_tilde u_half) = div_h(p_breve grad_h mu_p),

where ``u_half`` is the half-step intermediate velocity and the chemical
potentials couple both species through the periodic Poisson inverse:

    mu_n = F(n^m, n^{m+1}) - 1 + tau (ln n^{m+1} - ln n^m)
           + (-lap_h)^{-1}( (n^{m+1} + n^m)/2 - (p^{m+1} + p^m)/2 ),

with ``F(a, x)`` the secant slope of ``G(x) = x ln x`` (and symmetrically for
``p``).  Tilde quantities are the second-order extrapolations from the two
stored history levels; breve quantities are their positivity-regularized edge
averages.  The step finishes with the pressure projection

    u_hat^{m+1} = 2 u_half - u^m,
    u^{m+1} = u_hat^{m+1} - (tau/2) grad_h q,   psi^{m+1} = psi^m + q,

which restores discrete incompressibility exactly (up to spectral round-off).

The nonlinear system is solved by a damped linearized iteration: the
chemical potentials and the velocity coupling are lagged one iterate behind,
while the pointwise-stiff parts of mu (the secant slope and the tau*ln term)
are Newton-linearized about the iterate, so each species update is a single
symmetric positive-definite solve.  After each linear solve the concentration
update is re-expressed in conservative flux form, which makes the cell sums
telescope and keeps the species masses constant to machine round-off instead
of to the Krylov tolerance.  Updates that would produce nonpositive
concentrations are damped by halving until positive.

``reference_step`` advances the same equations by an independent dense Newton
method on the reduced concentration system (with an optional staged
fixed-point variant); it is meant for small grids and cross-checks only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .elliptic import (
    KrylovConfig,
    KrylovCounter,
    PoissonContext,
    inv_neg_laplace,
    pressure_project,
    project_solenoidal,
    solve_ion,
    solve_velocity,
)
from .errors import DomainError, GridMismatchError, PreconditionError, StepError
from .grid import (
    CellField,
    EdgeFieldX,
    EdgeFieldY,
    GridSpec,
    MacVelocity,
    avg_x,
    avg_y,
    convect,
    div_mac,
    div_mobility,
    grad_cell,
    laplace_mac,
    mean,
    mobility_flux,
    norm_inf,
)

__all__ = [
    "SchemeParams",
    "SchemeState",
    "StepReport",
    "extrapolate_half",
    "regularized_mobility",
    "f_dif",
    "f_dif_prime",
    "chem_potential",
    "step",
    "bootstrap_first_step",
    "init_from_functions",
    "reference_step",
    "residual_report",
]


# --------------------------------------------------------------------------
# parameter / state / report containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SchemeParams:
    """Everything a single step needs to know besides the state itself.

    ``iter_tol`` bounds the max-norm of consecutive-iterate differences over
    (n, p, u_half); ``min_damping`` is the smallest admissible positivity
    damping factor before the step gives up.  ``first_order_extrapolation``
    replaces the two-level extrapolations by the current level everywhere, a
    deliberately degraded mode used to verify that the convergence harness
    notices the loss of second-order accuracy.
    """

    tau: float
    grid: GridSpec
    t_final: Optional[float] = None
    iter_tol: float = 1e-10
    max_nonlinear_iters: int = 100
    min_damping: float = 1e-4
    krylov: KrylovConfig = KrylovConfig()
    first_order_extrapolation: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise PreconditionError(f"tau must be positive, got {self.tau}")
        if not self.iter_tol > 0:
            raise PreconditionError(f"iter_tol must be positive, got {self.iter_tol}")
        if self.max_nonlinear_iters < 1:
            raise PreconditionError("max_nonlinear_iters must be at least 1")
        if not 0 < self.min_damping <= 1:
            raise PreconditionError("min_damping must lie in (0, 1]")


@dataclass(frozen=True)
class SchemeState:
    """Two-level history of the evolved fields.

    ``*_curr`` live at step ``step_index`` (time ``time``); ``*_prev`` one
    step earlier.  States are values: :func:`step` returns a fresh instance
    and never mutates its input.
    """

    n_curr: CellField
    p_curr: CellField
    n_prev: CellField
    p_prev: CellField
    u_curr: MacVelocity
    u_prev: MacVelocity
    psi_curr: CellField
    time: float
    step_index: int

    def __post_init__(self):
        g = self.n_curr.grid
        for f in (self.p_curr, self.n_prev, self.p_prev, self.psi_curr,
                  self.u_curr.x, self.u_prev.x):
            if f.grid != g:
                raise GridMismatchError("state fields live on different grids")

    @property
    def grid(self) -> GridSpec:
        return self.n_curr.grid


@dataclass(frozen=True)
class StepReport:
    """Telemetry from one accepted (or aborted) step."""

    nonlinear_iters: int
    final_update_norm: float
    min_n: float
    min_p: float
    div_u_inf: float
    damping_events: int
    krylov_iters_total: int


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def extrapolate_half(f_curr, f_prev):
    """Second-order half-step extrapolation ``(3/2) f_curr - (1/2) f_prev``.

    Works for cell fields, edge fields, and velocity pairs alike; collapses
    to ``f_curr`` when the two levels coincide.
    """
    return 1.5 * f_curr - 0.5 * f_prev


def regularized_mobility(f_tilde: CellField, tau: float):
    """Positivity-safe edge averages of an extrapolated concentration.

    Each edge receives the two-point average of ``f_tilde``; averages that
    are not strictly positive are replaced by ``sqrt(avg^2 + tau^8)``, so the
    result is positive everywhere while agreeing with the plain average
    wherever the extrapolation stayed positive.  Returns the pair
    ``(EdgeFieldX, EdgeFieldY)``.
    """
    if not tau > 0:
        raise PreconditionError(f"tau must be positive, got {tau}")
    eps = tau ** 8

    def guard(a: np.ndarray) -> np.ndarray:
        return np.where(a > 0, a, np.sqrt(a * a + eps))

    return (EdgeFieldX(f_tilde.grid, guard(avg_x(f_tilde).values)),
            EdgeFieldY(f_tilde.grid, guard(avg_y(f_tilde).values)))


def _check_positive(name: str, *arrays):
    for a in arrays:
        if not np.all(a > 0):
            raise DomainError(f"{name} requires strictly positive arguments; "
                              f"min value {np.min(a)!r}")


_NEAR = 1e-6  # relative half-width of the series branch around x = a


def f_dif(a, x):
    """Secant slope ``(G(x) - G(a)) / (x - a)`` of ``G(x) = x ln x``.

    Defined for positive arguments; continuously extended across ``x = a``
    (value ``ln a + 1``) by a three-term series on the strip
    ``|x - a| <= 1e-6 max(a, x)``, where the direct quotient would lose all
    significant digits.  Accepts scalars or arrays (broadcasting).
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_positive("f_dif", a, x)
    s = x - a
    near = np.abs(s) <= _NEAR * np.maximum(a, x)
    secant = (x * np.log(x) - a * np.log(a)) / np.where(near, 1.0, s)
    series = np.log(a) + 1.0 + s / (2.0 * a) - s * s / (6.0 * a * a)
    out = np.where(near, series, secant)
    return float(out) if out.ndim == 0 else out


def f_dif_prime(a, x):
    """Derivative of :func:`f_dif` in its second argument.

    Equal to ``(G'(x)(x - a) - (G(x) - G(a))) / (x - a)^2`` away from the
    diagonal and to the series ``1/(2a) - s/(3a^2)`` nearby; nonnegative on
    the whole positive quadrant.
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_positive("f_dif_prime", a, x)
    s = x - a
    near = np.abs(s) <= _NEAR * np.maximum(a, x)
    denom = np.where(near, 1.0, s)
    quotient = ((np.log(x) + 1.0) * s - (x * np.log(x) - a * np.log(a))) / (denom * denom)
    series = 1.0 / (2.0 * a) - s / (3.0 * a * a)
    out = np.where(near, series, quotient)
    return float(out) if out.ndim == 0 else out


def chem_potential(n_new: CellField, n_old: CellField, other_new: CellField,
                   other_old: CellField, tau: float,
                   ctx: PoissonContext) -> CellField:
    """Half-step chemical potential of one species.

    ``mu = F(n_old, n_new) - 1 + tau (ln n_new - ln n_old)
    + (-lap)^{-1}((n_new + n_old)/2 - (other_new + other_old)/2)``.

    Both species must carry the same mass for the potential source to be
    solvable; a mismatch above 1e-10 is rejected.
    """
    grid = n_new.grid
    _check_positive("chem_potential", n_new.values, n_old.values,
                    other_new.values, other_old.values)
    m_self = 0.5 * (mean(n_new) + mean(n_old))
    m_other = 0.5 * (mean(other_new) + mean(other_old))
    if abs(m_self - m_other) > 1e-10:
        raise PreconditionError(
            "species means must agree for the potential solve: "
            f"{m_self!r} vs {m_other!r}")
    local = (f_dif(n_old.values, n_new.values) - 1.0
             + tau * (np.log(n_new.values) - np.log(n_old.values)))
    charge = 0.5 * (n_new.values + n_old.values
                    - other_new.values - other_old.values)
    # The mean part of the source carries no potential; dropping it here (it
    # is bounded by the 1e-10 check above) keeps the elliptic guard quiet.
    charge -= charge.mean()
    potential = inv_neg_laplace(ctx, CellField(grid, charge))
    return CellField(grid, local + potential.values)


def _gradient_flux_div(mx: EdgeFieldX, my: EdgeFieldY, g: CellField) -> CellField:
    """``div_h( m grad_h g )`` with prescribed positive edge mobilities."""
    grad = grad_cell(g)
    flux = MacVelocity(EdgeFieldX(g.grid, mx.values * grad.x.values),
                       EdgeFieldY(g.grid, my.values * grad.y.values))
    return div_mac(flux)


def _positivity_damping(n_vals, p_vals, dn, dp, floor):
    """Largest factor in the halving sequence 1, 1/2, 1/4, ... that keeps
    both damped candidates ``c + theta * dc`` strictly positive, or ``None``
    once the sequence drops below ``floor``."""
    theta = 1.0
    while (np.min(n_vals + theta * dn) <= 0.0
           or np.min(p_vals + theta * dp) <= 0.0):
        theta *= 0.5
        if theta < floor:
            return None
    return theta


# --------------------------------------------------------------------------
# the production step
# --------------------------------------------------------------------------

def _ion_update(ctx, c_old, c_k, c_tilde, mb_x, mb_y, mu_k, u_half, tau,
                krylov, counter):
    """One linearized implicit update of a single species.

    Solves ``x/tau - div(m grad(d x)) = c_old/tau - div(avg(c_tilde) u_half)
    + div(m grad(mu_k - d c_k))`` with the Newton diagonal
    ``d = F'(c_old, c_k) + tau/c_k``, then re-evaluates the update through
    the conservative fluxes at the solution, so that the returned field
    carries exactly the mass of ``c_old`` (the two divergences telescope),
    not a Krylov-residual perturbation of it.
    """
    grid = c_old.grid
    d = f_dif_prime(c_old.values, c_k.values) + tau / c_k.values
    transport = div_mobility(c_tilde, u_half)
    lagged = CellField(grid, mu_k.values - d * c_k.values)
    rhs = CellField(grid, c_old.values / tau - transport.values
                    + _gradient_flux_div(mb_x, mb_y, lagged).values)
    x = solve_ion(ctx, mb_x, mb_y, CellField(grid, d), tau, rhs, krylov, counter)
    mu_linear = CellField(grid, mu_k.values + d * (x.values - c_k.values))
    diffusion = _gradient_flux_div(mb_x, mb_y, mu_linear)
    return CellField(grid, c_old.values
                     + tau * (diffusion.values - transport.values))


def step(state: SchemeState, params: SchemeParams,
         ctx: Optional[PoissonContext] = None):
    """Advance the state by one time step.

    Returns ``(new_state, report)``.  Raises :class:`StepError` (with the
    partial report attached) when the nonlinear iteration exhausts its budget
    or the positivity damping hits its floor, and propagates inner-solver
    failures unchanged.
    """
    grid = state.grid
    if params.grid != grid:
        raise GridMismatchError("params.grid does not match the state grid")
    if ctx is None:
        ctx = PoissonContext(grid)
    tau = params.tau
    counter = KrylovCounter()

    if params.first_order_extrapolation:
        n_tilde, p_tilde, u_tilde = state.n_curr, state.p_curr, state.u_curr
    else:
        n_tilde = extrapolate_half(state.n_curr, state.n_prev)
        p_tilde = extrapolate_half(state.p_curr, state.p_prev)
        u_tilde = extrapolate_half(state.u_curr, state.u_prev)
    nb_x, nb_y = regularized_mobility(n_tilde, tau)
    pb_x, pb_y = regularized_mobility(p_tilde, tau)

    base_rhs_u = (2.0 / tau) * state.u_curr - grad_cell(state.psi_curr)

    n_k, p_k = state.n_curr, state.p_curr
    u_half = state.u_curr
    damping_events = 0
    iters_done = 0
    update_norm = float("inf")

    def partial_report(min_n, min_p):
        return StepReport(nonlinear_iters=iters_done,
                          final_update_norm=update_norm,
                          min_n=min_n, min_p=min_p,
                          div_u_inf=norm_inf(div_mac(u_half)),
                          damping_events=damping_events,
                          krylov_iters_total=counter.iterations)

    converged = False
    for iters_done in range(1, params.max_nonlinear_iters + 1):
        mu_n = chem_potential(n_k, state.n_curr, p_k, state.p_curr, tau, ctx)
        mu_p = chem_potential(p_k, state.p_curr, n_k, state.n_curr, tau, ctx)

        rhs_u = (base_rhs_u - mobility_flux(p_tilde, mu_p)
                 - mobility_flux(n_tilde, mu_n))
        u_next = solve_velocity(ctx, u_tilde, tau, rhs_u, params.krylov, counter)

        n_cand = _ion_update(ctx, state.n_curr, n_k, n_tilde, nb_x, nb_y,
                             mu_n, u_next, tau, params.krylov, counter)
        p_cand = _ion_update(ctx, state.p_curr, p_k, p_tilde, pb_x, pb_y,
                             mu_p, u_next, tau, params.krylov, counter)

        dn = n_cand.values - n_k.values
        dp = p_cand.values - p_k.values
        theta = _positivity_damping(n_k.values, p_k.values, dn, dp,
                                    params.min_damping)
        if theta is None:
            raise StepError(
                f"positivity damping fell below {params.min_damping} at "
                f"nonlinear iteration {iters_done}",
                report=partial_report(float(np.min(n_k.values + dn)),
                                      float(np.min(p_k.values + dp))))
        if theta < 1.0:
            damping_events += 1

        n_k = CellField(grid, n_k.values + theta * dn)
        p_k = CellField(grid, p_k.values + theta * dp)
        update_norm = max(theta * float(np.max(np.abs(dn))),
                          theta * float(np.max(np.abs(dp))),
                          norm_inf(u_next - u_half))
        u_half = u_next
        if update_norm <= params.iter_tol:
            converged = True
            break

    if not converged:
        raise StepError(
            f"nonlinear iteration did not reach {params.iter_tol} within "
            f"{params.max_nonlinear_iters} iterations "
            f"(last update {update_norm:.3e})",
            report=partial_report(float(np.min(n_k.values)),
                                  float(np.min(p_k.values))))

    u_hat_full = 2.0 * u_half - state.u_curr
    u_new, psi_new = pressure_project(ctx, u_hat_full, state.psi_curr, tau)

    new_state = SchemeState(
        n_curr=n_k, p_curr=p_k,
        n_prev=state.n_curr, p_prev=state.p_curr,
        u_curr=u_new, u_prev=state.u_curr,
        psi_curr=psi_new,
        time=state.time + tau,
        step_index=state.step_index + 1)
    report = StepReport(
        nonlinear_iters=iters_done,
        final_update_norm=update_norm,
        min_n=float(np.min(n_k.values)),
        min_p=float(np.min(p_k.values)),
        div_u_inf=norm_inf(div_mac(u_new)),
        damping_events=damping_events,
        krylov_iters_total=counter.iterations)
    return new_state, report


def bootstrap_first_step(initial: SchemeState, params: SchemeParams,
                         ctx: Optional[PoissonContext] = None):
    """Take the very first step by duplicating the history levels.

    With ``prev := curr`` the extrapolations collapse to the current level,
    which turns the first step into a first-order variant with an O(tau^2)
    local perturbation — harmless for the global second-order accuracy.
    Returns ``(state, report)`` like :func:`step`.
    """
    if initial.step_index != 0:
        raise PreconditionError(
            f"bootstrap applies to a fresh state, got step_index="
            f"{initial.step_index}")
    seeded = replace(initial,
                     n_prev=initial.n_curr.copy(),
                     p_prev=initial.p_curr.copy(),
                     u_prev=initial.u_curr.copy())
    return step(seeded, params, ctx)


def init_from_functions(spec: GridSpec, p0: Callable, n0: Callable,
                        u0: Callable, v0: Callable, psi0: Callable,
                        ctx: Optional[PoissonContext] = None) -> SchemeState:
    """Sample initial closures onto the staggered grid and normalize them.

    ``psi`` is re-centered to mean zero and the sampled velocity is projected
    onto the discretely divergence-free space (pointwise samples of a
    divergence-free field are not discretely divergence-free).
    """
    if ctx is None:
        ctx = PoissonContext(spec)
    p = CellField.from_function(spec, p0)
    n = CellField.from_function(spec, n0)
    psi_raw = CellField.from_function(spec, psi0)
    psi = CellField(spec, psi_raw.values - np.mean(psi_raw.values))
    u = project_solenoidal(ctx, MacVelocity.from_functions(spec, u0, v0))
    return SchemeState(n_curr=n, p_curr=p,
                       n_prev=n.copy(), p_prev=p.copy(),
                       u_curr=u, u_prev=u.copy(),
                       psi_curr=psi, time=0.0, step_index=0)


# --------------------------------------------------------------------------
# dense reference solver and residual bookkeeping
# --------------------------------------------------------------------------

def _pack_mac(v: MacVelocity) -> np.ndarray:
    return np.concatenate([v.x.values.ravel(), v.y.values.ravel()])


def _unpack_mac(grid: GridSpec, flat: np.ndarray) -> MacVelocity:
    nn = grid.n * grid.n
    return MacVelocity(
        EdgeFieldX(grid, flat[:nn].reshape(grid.n, grid.n)),
        EdgeFieldY(grid, flat[nn:].reshape(grid.n, grid.n)))


def _probe(apply_fn, dim: int) -> np.ndarray:
    """Materialize a linear map as a dense matrix by probing basis vectors."""
    out = np.empty((dim, dim))
    e = np.zeros(dim)
    for i in range(dim):
        e[i] = 1.0
        out[:, i] = apply_fn(e)
        e[i] = 0.0
    return out


def reference_step(state: SchemeState, params: SchemeParams,
                   ctx: Optional[PoissonContext] = None,
                   a_reg: float = 0.0, staged: bool = False):
    """Advance one step with a dense direct method, for cross-checking.

    The velocity subproblem is affine in the chemical potentials, so the
    whole step reduces to a nonlinear system in the concentrations alone:

        H(c) = (c - c^m)/tau + transport(u(mu(c))) - diffusion(mu(c)) = 0.

    The default path solves ``H(c) = 0`` by a damped Newton method with all
    operators materialized as dense matrices — robust at any step size, but
    O(N^4) memory, so intended for small grids only.

    With ``staged=True`` the stage-wise fixed-point construction is used
    instead: each stage solves the pointwise system
    ``mu(x) + a_reg x = r^(k) + shift`` (with per-species mean pinning),
    where ``r^(k)`` is the potential the transport-diffusion balance would
    need in order to produce the current increment, offset by
    ``a_reg c^(k)``.  That map only contracts for moderate ``tau`` when
    ``a_reg = 0``; the regularized variant always contracts in theory but at
    a rate that makes it impractical, which is why it is not the default.

    Returns ``(new_state, report)`` with ``krylov_iters_total = 0``.
    """
    grid = state.grid
    if ctx is None:
        ctx = PoissonContext(grid)
    tau = params.tau
    n_side = grid.n
    nn = n_side * n_side

    if params.first_order_extrapolation:
        n_tilde, p_tilde, u_tilde = state.n_curr, state.p_curr, state.u_curr
    else:
        n_tilde = extrapolate_half(state.n_curr, state.n_prev)
        p_tilde = extrapolate_half(state.p_curr, state.p_prev)
        u_tilde = extrapolate_half(state.u_curr, state.u_prev)
    nb_x, nb_y = regularized_mobility(n_tilde, tau)
    pb_x, pb_y = regularized_mobility(p_tilde, tau)

    def cell(vec: np.ndarray) -> CellField:
        return CellField(grid, vec.reshape(n_side, n_side))

    # dense velocity operator and the affine solve u(mu) = u0 - V^{-1} F mu
    def vel_apply(flat):
        v = _unpack_mac(grid, flat)
        av = (2.0 / tau) * v + convect(u_tilde, v) - laplace_mac(v)
        return _pack_mac(av)

    def force_apply(flat):
        mu_n, mu_p = cell(flat[:nn]), cell(flat[nn:])
        f = mobility_flux(p_tilde, mu_p) + mobility_flux(n_tilde, mu_n)
        return _pack_mac(f)

    def transport_apply(flat):
        v = _unpack_mac(grid, flat)
        return np.concatenate([div_mobility(n_tilde, v).values.ravel(),
                               div_mobility(p_tilde, v).values.ravel()])

    def diffusion_apply(flat):
        mu_n, mu_p = cell(flat[:nn]), cell(flat[nn:])
        return np.concatenate([
            _gradient_flux_div(nb_x, nb_y, mu_n).values.ravel(),
            _gradient_flux_div(pb_x, pb_y, mu_p).values.ravel()])

    vel_mat = _probe(vel_apply, 2 * nn)
    force_mat = _probe(force_apply, 2 * nn)
    transport_mat = _probe(transport_apply, 2 * nn)
    diffusion_mat = _probe(diffusion_apply, 2 * nn)

    b0 = _pack_mac((2.0 / tau) * state.u_curr - grad_cell(state.psi_curr))
    u0 = np.linalg.solve(vel_mat, b0)
    u_of_mu = -np.linalg.solve(vel_mat, force_mat)  # linear part of mu -> u

    # L(mu) = flux_mat @ mu + l0 reproduces -(c^{m+1} - c^m)/tau at a solution
    flux_mat = transport_mat @ u_of_mu - diffusion_mat
    l0 = transport_mat @ u0

    # dense mean-zero Poisson inverse (zero row/column sum by construction)
    k_mat = _probe(lambda e: ctx.apply_inverse(e.reshape(n_side, n_side)).ravel(), nn)

    n_old = state.n_curr.values.ravel()
    p_old = state.p_curr.values.ravel()
    beta_n = float(np.mean(n_old))
    beta_p = float(np.mean(p_old))

    def mu_pair(xn, xp):
        local_n = f_dif(n_old, xn) - 1.0 + tau * (np.log(xn) - np.log(n_old))
        local_p = f_dif(p_old, xp) - 1.0 + tau * (np.log(xp) - np.log(p_old))
        charge = 0.5 * (xn + n_old - xp - p_old)
        pot = k_mat @ (charge - charge.mean())
        return local_n + pot, local_p - pot

    def mu_jacobian(xn, xp):
        # [[diag_n + K/2, -K/2], [-K/2, diag_p + K/2]]
        diag_n = f_dif_prime(n_old, xn) + tau / xn
        diag_p = f_dif_prime(p_old, xp) + tau / xp
        jac = np.zeros((2 * nn, 2 * nn))
        jac[:nn, :nn] = np.diag(diag_n) + 0.5 * k_mat
        jac[:nn, nn:] = -0.5 * k_mat
        jac[nn:, :nn] = -0.5 * k_mat
        jac[nn:, nn:] = np.diag(diag_p) + 0.5 * k_mat
        return jac

    def damped_newton_update(xn, xp, dxn, dxp, iters_done):
        theta = _positivity_damping(xn, xp, dxn, dxp, params.min_damping)
        if theta is None:
            raise StepError("reference solve: positivity damping fell below "
                            f"{params.min_damping} at iteration {iters_done}")
        return xn + theta * dxn, xp + theta * dxp, theta

    damping_events = 0

    if not staged:
        # Newton on H(c) = (c - c^m)/tau + l0 + flux_mat @ mu(c) = 0
        c = np.concatenate([n_old, p_old])
        c_old_vec = c.copy()
        update = float("inf")
        for iters in range(1, params.max_nonlinear_iters + 1):
            mu_n, mu_p = mu_pair(c[:nn], c[nn:])
            resid = (c - c_old_vec) / tau + l0 + flux_mat @ np.concatenate([mu_n, mu_p])
            jac = np.eye(2 * nn) / tau + flux_mat @ mu_jacobian(c[:nn], c[nn:])
            delta = np.linalg.solve(jac, -resid)
            xn, xp, theta = damped_newton_update(c[:nn], c[nn:],
                                                 delta[:nn], delta[nn:], iters)
            if theta < 1.0:
                damping_events += 1
            c = np.concatenate([xn, xp])
            update = theta * float(np.max(np.abs(delta)))
            if update <= params.iter_tol:
                break
        else:
            raise StepError("reference Newton did not converge "
                            f"(last update {update:.3e})")
        c_n, c_p = c[:nn], c[nn:]
        outer_iters = iters
    else:
        # staged construction: freeze the increment, solve the pointwise
        # system for the next iterate, repeat
        c_n, c_p = n_old.copy(), p_old.copy()
        update = float("inf")
        for outer_iters in range(1, params.max_nonlinear_iters + 1):
            increment = np.concatenate([c_n - n_old, c_p - p_old])
            target, *_ = np.linalg.lstsq(flux_mat, -increment / tau - l0,
                                         rcond=None)
            r_n = target[:nn] - target[:nn].mean() + a_reg * c_n
            r_p = target[nn:] - target[nn:].mean() + a_reg * c_p

            # Newton for mu(x) + a_reg x = r + shift, mean(x) pinned
            xn, xp = c_n.copy(), c_p.copy()
            sn = sp = 0.0
            for inner in range(60):
                mu_n, mu_p = mu_pair(xn, xp)
                res = np.concatenate([
                    mu_n + a_reg * xn - r_n - sn,
                    mu_p + a_reg * xp - r_p - sp,
                    [np.mean(xn) - beta_n, np.mean(xp) - beta_p]])
                if float(np.max(np.abs(res))) <= 0.1 * params.iter_tol:
                    break
                jac = np.zeros((2 * nn + 2, 2 * nn + 2))
                jac[:2 * nn, :2 * nn] = (mu_jacobian(xn, xp)
                                         + a_reg * np.eye(2 * nn))
                jac[:nn, 2 * nn] = -1.0
                jac[nn:2 * nn, 2 * nn + 1] = -1.0
                jac[2 * nn, :nn] = 1.0 / nn
                jac[2 * nn + 1, nn:2 * nn] = 1.0 / nn
                delta = np.linalg.solve(jac, -res)
                xn, xp, theta = damped_newton_update(
                    xn, xp, delta[:nn], delta[nn:2 * nn], outer_iters)
                if theta < 1.0:
                    damping_events += 1
                sn += theta * delta[2 * nn]
                sp += theta * delta[2 * nn + 1]
            else:
                raise StepError("reference stage solve did not converge")

            update = float(max(np.max(np.abs(xn - c_n)),
                               np.max(np.abs(xp - c_p))))
            c_n, c_p = xn, xp
            if update <= params.iter_tol:
                break
        else:
            raise StepError("staged reference iteration did not converge "
                            f"(last update {update:.3e}); it only contracts "
                            "for moderate tau")

    # converged concentrations -> potentials -> velocity -> projection
    mu_n, mu_p = mu_pair(c_n, c_p)
    mu_vec = np.concatenate([mu_n, mu_p])
    u_half = _unpack_mac(grid, u0 + u_of_mu @ mu_vec)
    u_hat = 2.0 * u_half - state.u_curr
    u_new, psi_new = pressure_project(ctx, u_hat, state.psi_curr, tau)

    n_new, p_new = cell(c_n), cell(c_p)
    new_state = SchemeState(
        n_curr=n_new, p_curr=p_new,
        n_prev=state.n_curr, p_prev=state.p_curr,
        u_curr=u_new, u_prev=state.u_curr,
        psi_curr=psi_new,
        time=state.time + tau,
        step_index=state.step_index + 1)
    report = StepReport(
        nonlinear_iters=outer_iters,
        final_update_norm=update,
        min_n=float(np.min(c_n)), min_p=float(np.min(c_p)),
        div_u_inf=norm_inf(div_mac(u_new)),
        damping_events=damping_events,
        krylov_iters_total=0)
    return new_state, report


def residual_report(old_state: SchemeState, new_state: SchemeState,
                    tau: float, ctx: Optional[PoissonContext] = None) -> dict:
    """Max-norm residuals of the scheme equations across one completed step.

    Reconstructs the intermediate velocity from the projection identity
    ``u_hat^{m+1} = u^{m+1} + (tau/2) grad(psi^{m+1} - psi^m)`` and the
    half-step value ``u_half = (u_hat^{m+1} + u^m)/2``, rebuilds the
    chemical potentials from the stored concentration levels, and plugs
    everything into the ion, velocity, and divergence equations.  Small
    residuals certify that the two states are joined by an honest step; the
    keys are ``"ion_n"``, ``"ion_p"``, ``"velocity"``, ``"divergence"``.
    """
    grid = old_state.grid
    if ctx is None:
        ctx = PoissonContext(grid)

    n_tilde = extrapolate_half(old_state.n_curr, old_state.n_prev)
    p_tilde = extrapolate_half(old_state.p_curr, old_state.p_prev)
    u_tilde = extrapolate_half(old_state.u_curr, old_state.u_prev)
    nb_x, nb_y = regularized_mobility(n_tilde, tau)
    pb_x, pb_y = regularized_mobility(p_tilde, tau)

    q = new_state.psi_curr - old_state.psi_curr
    u_hat = new_state.u_curr + (tau / 2.0) * grad_cell(q)
    u_half = 0.5 * (u_hat + old_state.u_curr)

    mu_n = chem_potential(new_state.n_curr, old_state.n_curr,
                          new_state.p_curr, old_state.p_curr, tau, ctx)
    mu_p = chem_potential(new_state.p_curr, old_state.p_curr,
                          new_state.n_curr, old_state.n_curr, tau, ctx)

    ion_n = CellField(grid, (new_state.n_curr.values - old_state.n_curr.values) / tau
                      + div_mobility(n_tilde, u_half).values
                      - _gradient_flux_div(nb_x, nb_y, mu_n).values)
    ion_p = CellField(grid, (new_state.p_curr.values - old_state.p_curr.values) / tau
                      + div_mobility(p_tilde, u_half).values
                      - _gradient_flux_div(pb_x, pb_y, mu_p).values)
    vel = ((2.0 / tau) * (u_half - old_state.u_curr)
           + convect(u_tilde, u_half) - laplace_mac(u_half)
           + grad_cell(old_state.psi_curr)
           + mobility_flux(p_tilde, mu_p) + mobility_flux(n_tilde, mu_n))
    return {
        "ion_n": norm_inf(ion_n),
        "ion_p": norm_inf(ion_p),
        "velocity": norm_inf(vel),
        "divergence": norm_inf(div_mac(new_state.u_curr)),
    }
