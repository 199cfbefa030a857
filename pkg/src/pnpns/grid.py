"""Staggered (MAC) grid fields and discrete spatial operators.

This module is the single source of truth for the staggering conventions.
Everything else in the package manipulates fields exclusively through the
containers and operators defined here.

Grid layout
-----------
The domain is the periodic square ``[x0, x0 + L) x [y0, y0 + L)`` divided into
``N x N`` square cells of width ``h = L / N``.  Three families of degrees of
freedom live on the grid, each stored as an ``(N, N)`` array ``values[i, j]``
with ``i`` the x-index and ``j`` the y-index:

* ``CellField``   -- scalars at cell centers ``((i + 1/2) h, (j + 1/2) h)``;
  carries concentrations, pressure, potentials.
* ``EdgeFieldX``  -- x-velocity family at the east-west edge midpoints
  ``(i h, (j + 1/2) h)`` (the vertical cell faces).
* ``EdgeFieldY``  -- y-velocity family at the north-south edge midpoints
  ``((i + 1/2) h, j h)`` (the horizontal cell faces).

(Coordinates above are relative to the lower-left corner ``(x0, y0)``.)
``MacVelocity`` bundles one ``EdgeFieldX`` and one ``EdgeFieldY``.

All index arithmetic is periodic (modulo N); stencils are realized with
``np.roll``.  With the convention ``roll(a, 1, axis)[i] == a[i-1]``, the
difference and averaging operators read off the definitions directly:

* gradient (cell -> edge pair):  ``(Dx f)[i, j] = (f[i, j] - f[i-1, j]) / h``
  lands on ``EdgeFieldX``; ``Dy`` analogously on ``EdgeFieldY``.
* divergence (edge pair -> cell):
  ``(div u)[i, j] = (ux[i+1, j] - ux[i, j]) / h + (uy[i, j+1] - uy[i, j]) / h``.
* wide differences (same family -> same family):
  ``(Dx~ g)[i, j] = (g[i+1, j] - g[i-1, j]) / (2 h)``.
* two-point averages carry cell values onto each edge family, and the
  four-point average ``A_xy`` transfers one edge family onto the other.

Inner products are the ``h**2``-weighted sums over each family (``ip_a`` for
the x-edge family, ``ip_b`` for the y-edge family, ``ip_c`` for cells) and are
evaluated with numpy's pairwise summation so that results are independent of
any threading and reproducible bit-for-bit.

Fields are treated as immutable values: operators always allocate fresh
outputs and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GridMismatchError

__all__ = [
    "GridSpec",
    "CellField",
    "EdgeFieldX",
    "EdgeFieldY",
    "MacVelocity",
    "grad_cell",
    "wide_diff_x",
    "wide_diff_y",
    "div_mac",
    "discrete_curl",
    "laplace",
    "laplace_mac",
    "avg_x",
    "avg_y",
    "avg_xy_x",
    "avg_xy_y",
    "convect",
    "mobility_flux",
    "div_mobility",
    "ip_a",
    "ip_b",
    "ip_c",
    "ip_vec",
    "mean",
    "norm_lp",
    "norm_inf",
    "grad_norm_sq",
    "restrict_cell",
    "restrict_mac",
]


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one periodic square mesh.

    Parameters
    ----------
    n : int
        Number of cells per axis.  Must be even and at least 4 (the grid
        transfer operators and the symmetric benchmark data require it).
    length : float
        Edge length ``L`` of the square domain.
    x0, y0 : float
        Coordinates of the lower-left corner.
    """

    n: int
    length: float = 4.0
    x0: float = -2.0
    y0: float = -2.0

    def __post_init__(self):
        if self.n < 4 or self.n % 2 != 0:
            raise GridMismatchError(
                f"grid size must be even and >= 4, got n={self.n}")
        if not self.length > 0:
            raise GridMismatchError(f"domain length must be > 0, got {self.length}")

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def area(self) -> float:
        return self.length * self.length

    def coarsen(self) -> "GridSpec":
        """The grid with half the resolution (for restriction)."""
        if self.n % 2 != 0:
            raise GridMismatchError(f"cannot halve odd grid n={self.n}")
        return GridSpec(self.n // 2, self.length, self.x0, self.y0)

    # --- mesh point coordinates (index [i, j], meshgrid 'ij' layout) ------
    def cell_xy(self):
        """Coordinates of cell centers ((i+1/2)h, (j+1/2)h)."""
        c = (np.arange(self.n) + 0.5) * self.h
        return np.meshgrid(self.x0 + c, self.y0 + c, indexing="ij")

    def edge_x_xy(self):
        """Coordinates of east-west edge points (ih, (j+1/2)h)."""
        e = np.arange(self.n) * self.h
        c = (np.arange(self.n) + 0.5) * self.h
        return np.meshgrid(self.x0 + e, self.y0 + c, indexing="ij")

    def edge_y_xy(self):
        """Coordinates of north-south edge points ((i+1/2)h, jh)."""
        e = np.arange(self.n) * self.h
        c = (np.arange(self.n) + 0.5) * self.h
        return np.meshgrid(self.x0 + c, self.y0 + e, indexing="ij")


class _Field:
    """Shared container behavior for the three scalar field families."""

    __slots__ = ("grid", "values")
    _coords = None  # name of the GridSpec coordinate helper

    def __init__(self, grid: GridSpec, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n, grid.n):
            raise GridMismatchError(
                f"{type(self).__name__} expects shape {(grid.n, grid.n)}, "
                f"got {values.shape}")
        self.grid = grid
        self.values = values

    # --- constructors -----------------------------------------------------
    @classmethod
    def zeros(cls, grid: GridSpec):
        return cls(grid, np.zeros((grid.n, grid.n)))

    @classmethod
    def full(cls, grid: GridSpec, value: float):
        return cls(grid, np.full((grid.n, grid.n), float(value)))

    @classmethod
    def from_function(cls, grid: GridSpec, f: Callable):
        """Sample ``f(x, y)`` at this family's mesh points."""
        xx, yy = getattr(grid, cls._coords)()
        return cls(grid, np.asarray(f(xx, yy), dtype=float))

    def copy(self):
        return type(self)(self.grid, self.values.copy())

    # --- value semantics ----------------------------------------------------
    def _like(self, other):
        if type(other) is not type(self):
            raise GridMismatchError(
                f"cannot combine {type(self).__name__} with {type(other).__name__}")
        if other.grid != self.grid:
            raise GridMismatchError("fields live on different grids")
        return other

    def __add__(self, other):
        return type(self)(self.grid, self.values + self._like(other).values)

    def __sub__(self, other):
        return type(self)(self.grid, self.values - self._like(other).values)

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def __mul__(self, other):
        if isinstance(other, _Field):
            return type(self)(self.grid, self.values * self._like(other).values)
        return type(self)(self.grid, self.values * float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return (f"{type(self).__name__}(n={self.grid.n}, "
                f"min={self.values.min():.3g}, max={self.values.max():.3g})")


class CellField(_Field):
    """Scalar samples at cell centers ((i+1/2)h, (j+1/2)h)."""

    _coords = "cell_xy"


class EdgeFieldX(_Field):
    """Scalar samples at east-west edge points (ih, (j+1/2)h)."""

    _coords = "edge_x_xy"


class EdgeFieldY(_Field):
    """Scalar samples at north-south edge points ((i+1/2)h, jh)."""

    _coords = "edge_y_xy"


class MacVelocity:
    """A velocity pair: x-component on east-west edges, y-component on
    north-south edges."""

    __slots__ = ("x", "y")

    def __init__(self, x: EdgeFieldX, y: EdgeFieldY):
        if not isinstance(x, EdgeFieldX) or not isinstance(y, EdgeFieldY):
            raise GridMismatchError("MacVelocity needs (EdgeFieldX, EdgeFieldY)")
        if x.grid != y.grid:
            raise GridMismatchError("velocity components live on different grids")
        self.x = x
        self.y = y

    @property
    def grid(self) -> GridSpec:
        return self.x.grid

    @classmethod
    def zeros(cls, grid: GridSpec):
        return cls(EdgeFieldX.zeros(grid), EdgeFieldY.zeros(grid))

    @classmethod
    def from_functions(cls, grid: GridSpec, fx: Callable, fy: Callable):
        return cls(EdgeFieldX.from_function(grid, fx),
                   EdgeFieldY.from_function(grid, fy))

    def copy(self):
        return MacVelocity(self.x.copy(), self.y.copy())

    def __add__(self, other):
        return MacVelocity(self.x + other.x, self.y + other.y)

    def __sub__(self, other):
        return MacVelocity(self.x - other.x, self.y - other.y)

    def __neg__(self):
        return MacVelocity(-self.x, -self.y)

    def __mul__(self, scalar):
        return MacVelocity(self.x * scalar, self.y * scalar)

    __rmul__ = __mul__

    def __repr__(self):
        return f"MacVelocity(n={self.grid.n})"


# --------------------------------------------------------------------------
# periodic shift helpers: value at the neighbouring index
# --------------------------------------------------------------------------

def _xm(a):  # a[i-1, j]
    return np.roll(a, 1, axis=0)


def _xp(a):  # a[i+1, j]
    return np.roll(a, -1, axis=0)


def _ym(a):  # a[i, j-1]
    return np.roll(a, 1, axis=1)


def _yp(a):  # a[i, j+1]
    return np.roll(a, -1, axis=1)


def _same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError("operands live on different grids")
    return g


def _expect(field, kind):
    if not isinstance(field, kind):
        raise GridMismatchError(
            f"expected {kind.__name__}, got {type(field).__name__}")
    return field


# --------------------------------------------------------------------------
# difference operators
# --------------------------------------------------------------------------

def grad_cell(f: CellField) -> MacVelocity:
    """Discrete gradient of a cell field, landing on the two edge families.

    ``(Dx f)[i, j] = (f[i, j] - f[i-1, j]) / h`` on east-west edges and
    ``(Dy f)[i, j] = (f[i, j] - f[i, j-1]) / h`` on north-south edges.
    """
    _expect(f, CellField)
    h = f.grid.h
    gx = (f.values - _xm(f.values)) / h
    gy = (f.values - _ym(f.values)) / h
    return MacVelocity(EdgeFieldX(f.grid, gx), EdgeFieldY(f.grid, gy))


def wide_diff_x(f: _Field) -> np.ndarray:
    """Wide-stencil centered difference (g[i+1, j] - g[i-1, j]) / (2h).

    Maps any family onto itself; returns the raw array (internal helper for
    the convection form, also used directly in tests).
    """
    return (_xp(f.values) - _xm(f.values)) / (2.0 * f.grid.h)


def wide_diff_y(f: _Field) -> np.ndarray:
    """Wide-stencil centered difference (g[i, j+1] - g[i, j-1]) / (2h)."""
    return (_yp(f.values) - _ym(f.values)) / (2.0 * f.grid.h)


def wide_diff(f: CellField) -> tuple[CellField, CellField]:
    """Both wide-stencil differences of a cell field, as cell fields."""
    _expect(f, CellField)
    return (CellField(f.grid, wide_diff_x(f)), CellField(f.grid, wide_diff_y(f)))


def div_mac(v: MacVelocity) -> CellField:
    """Discrete divergence of an edge pair, at cell centers."""
    h = v.grid.h
    d = (_xp(v.x.values) - v.x.values) / h + (_yp(v.y.values) - v.y.values) / h
    return CellField(v.grid, d)


def discrete_curl(s: CellField) -> MacVelocity:
    """Rotated gradient (-Dy s, Dx s) with shifted indices so that
    ``div_mac(discrete_curl(s))`` telescopes to zero identically.

    The x-component at edge (i, j+1/2) is ``-(s[i, j+1] - s[i, j]) / h`` and
    the y-component at (i+1/2, j) is ``(s[i+1, j] - s[i, j]) / h``; the four
    contributions to each cell's divergence cancel in exact pairs.
    """
    _expect(s, CellField)
    h = s.grid.h
    vx = -(_yp(s.values) - s.values) / h
    vy = (_xp(s.values) - s.values) / h
    return MacVelocity(EdgeFieldX(s.grid, vx), EdgeFieldY(s.grid, vy))


def laplace(f: _Field):
    """Standard five-point Laplacian on the field's own family."""
    a = f.values
    h2 = f.grid.h ** 2
    out = (_xp(a) + _xm(a) + _yp(a) + _ym(a) - 4.0 * a) / h2
    return type(f)(f.grid, out)


def laplace_mac(v: MacVelocity) -> MacVelocity:
    """Component-wise five-point Laplacian of a velocity pair."""
    return MacVelocity(laplace(v.x), laplace(v.y))


# --------------------------------------------------------------------------
# averaging operators
# --------------------------------------------------------------------------

def avg_x(f: CellField) -> EdgeFieldX:
    """Two-point average of cell values onto east-west edges:
    ``(Ax f)[i, j] = (f[i-1, j] + f[i, j]) / 2``."""
    _expect(f, CellField)
    return EdgeFieldX(f.grid, 0.5 * (_xm(f.values) + f.values))


def avg_y(f: CellField) -> EdgeFieldY:
    """Two-point average of cell values onto north-south edges."""
    _expect(f, CellField)
    return EdgeFieldY(f.grid, 0.5 * (_ym(f.values) + f.values))


def avg_xy_y(u_x: EdgeFieldX) -> EdgeFieldY:
    """Four-point average carrying the x-edge family onto y-edges:
    ``(Axy ux)[i, j] = (ux[i, j-1] + ux[i, j] + ux[i+1, j-1] + ux[i+1, j]) / 4``.
    """
    _expect(u_x, EdgeFieldX)
    a = u_x.values
    out = 0.25 * (_ym(a) + a + _xp(_ym(a)) + _xp(a))
    return EdgeFieldY(u_x.grid, out)


def avg_xy_x(u_y: EdgeFieldY) -> EdgeFieldX:
    """Four-point average carrying the y-edge family onto x-edges:
    ``(Axy uy)[i, j] = (uy[i-1, j] + uy[i, j] + uy[i-1, j+1] + uy[i, j+1]) / 4``.
    """
    _expect(u_y, EdgeFieldY)
    a = u_y.values
    out = 0.25 * (_xm(a) + a + _yp(_xm(a)) + _yp(a))
    return EdgeFieldX(u_y.grid, out)


# --------------------------------------------------------------------------
# composite transport operators
# --------------------------------------------------------------------------

def convect(u_tilde: MacVelocity, v: MacVelocity) -> MacVelocity:
    """Skew-symmetric convection form
    ``b(u, v) = (u . grad_h v + div_h(v u^T)) / 2``
    with ``u_tilde`` advecting and ``v`` advected.

    Each component combines the advective and divergence forms built from
    wide-stencil differences and the cross-family four-point average; the
    average of the two forms makes ``<b(u, v), v>_1`` vanish identically for
    every periodic ``u``, which is what the energy estimate uses.
    """
    _same_grid(u_tilde.x, v.x)
    grid = v.grid
    h2 = 2.0 * grid.h

    ux, uy = u_tilde.x.values, u_tilde.y.values
    vx, vy = v.x.values, v.y.values
    uy_on_x = avg_xy_x(u_tilde.y).values  # advecting y-velocity seen by x-edges
    ux_on_y = avg_xy_y(u_tilde.x).values  # advecting x-velocity seen by y-edges

    def ddx(a):
        return (_xp(a) - _xm(a)) / h2

    def ddy(a):
        return (_yp(a) - _ym(a)) / h2

    bx = 0.5 * (ux * ddx(vx) + uy_on_x * ddy(vx)
                + ddx(ux * vx) + ddy(uy_on_x * vx))
    by = 0.5 * (ux_on_y * ddx(vy) + uy * ddy(vy)
                + ddx(ux_on_y * vy) + ddy(uy * vy))
    return MacVelocity(EdgeFieldX(grid, bx), EdgeFieldY(grid, by))


def mobility_flux(f: CellField, g: CellField) -> MacVelocity:
    """Edge flux ``A_h f * grad_h g``: gradient of ``g`` weighted by the
    two-point edge averages of ``f``."""
    _same_grid(f, g)
    grad = grad_cell(g)
    return MacVelocity(EdgeFieldX(f.grid, grad.x.values * avg_x(f).values),
                       EdgeFieldY(f.grid, grad.y.values * avg_y(f).values))


def div_mobility(f: CellField, u: MacVelocity) -> CellField:
    """Cell divergence of the averaged-density transport flux
    ``div_h(A_h f u)``."""
    _same_grid(f, u.x)
    flux = MacVelocity(EdgeFieldX(f.grid, u.x.values * avg_x(f).values),
                       EdgeFieldY(f.grid, u.y.values * avg_y(f).values))
    return div_mac(flux)


# --------------------------------------------------------------------------
# inner products, norms, means
# --------------------------------------------------------------------------

def _ip(a: _Field, b: _Field, kind) -> float:
    _expect(a, kind)
    _expect(b, kind)
    _same_grid(a, b)
    return float(np.sum(a.values * b.values)) * a.grid.h ** 2


def ip_a(a: EdgeFieldX, b: EdgeFieldX) -> float:
    """h^2-weighted sum over the east-west edge family."""
    return _ip(a, b, EdgeFieldX)


def ip_b(a: EdgeFieldY, b: EdgeFieldY) -> float:
    """h^2-weighted sum over the north-south edge family."""
    return _ip(a, b, EdgeFieldY)


def ip_c(a: CellField, b: CellField) -> float:
    """h^2-weighted sum over the cell family."""
    return _ip(a, b, CellField)


def ip_vec(u: MacVelocity, v: MacVelocity) -> float:
    """Velocity inner product: x-components over edges A plus y over B."""
    return ip_a(u.x, v.x) + ip_b(u.y, v.y)


def mean(f: CellField) -> float:
    """Discrete average ``<f, 1>_C / |Omega|`` (pairwise summation)."""
    _expect(f, CellField)
    return float(np.sum(f.values)) / f.values.size


def norm_lp(f, p: float) -> float:
    """Discrete l^p norm, ``(h^2 sum |f|^p)^(1/p)``, for fields or velocity
    pairs (the pair is treated as one long vector of samples)."""
    if not 1 <= p < np.inf:
        raise ValueError(f"norm_lp needs p in [1, inf), got {p}")
    if isinstance(f, MacVelocity):
        s = float(np.sum(np.abs(f.x.values) ** p) + np.sum(np.abs(f.y.values) ** p))
        return float((f.grid.h ** 2 * s) ** (1.0 / p))
    return float((f.grid.h ** 2 * np.sum(np.abs(f.values) ** p)) ** (1.0 / p))


def norm_inf(f) -> float:
    """Max-norm over all samples of a field or velocity pair."""
    if isinstance(f, MacVelocity):
        return float(max(np.max(np.abs(f.x.values)), np.max(np.abs(f.y.values))))
    return float(np.max(np.abs(f.values)))


def grad_norm_sq(f) -> float:
    """``||grad_h f||_2^2`` for a single field of any family, or summed over
    the components of a velocity pair.

    On a periodic grid the squared gradient norm of a field is the h^2-sum of
    both one-sided difference quotients, regardless of which family the
    differences land on; this matches ``-<f, laplace(f)>`` exactly.
    """
    if isinstance(f, MacVelocity):
        return grad_norm_sq(f.x) + grad_norm_sq(f.y)
    a = f.values
    h = f.grid.h
    dx = (_xp(a) - a) / h
    dy = (_yp(a) - a) / h
    return float(h * h * (np.sum(dx * dx) + np.sum(dy * dy)))


# --------------------------------------------------------------------------
# grid transfer (fine -> coarse), used by the convergence study
# --------------------------------------------------------------------------

def restrict_cell(fine: CellField) -> CellField:
    """Average each 2x2 block of fine cells onto the parent coarse cell."""
    _expect(fine, CellField)
    coarse = fine.grid.coarsen()
    n = coarse.n
    blocks = fine.values.reshape(n, 2, n, 2)
    return CellField(coarse, blocks.mean(axis=(1, 3)))


def restrict_mac(fine: MacVelocity) -> MacVelocity:
    """Restrict a fine velocity pair onto the coarse edge families.

    A coarse x-edge lies on the fine line ``i_f = 2i`` and spans two fine
    x-edges ``(2i, 2j)`` and ``(2i, 2j+1)``, whose mean is taken; y-edges
    mirror this with the axes swapped.
    """
    coarse = fine.grid.coarsen()
    n = coarse.n
    fx = fine.x.values[::2, :].reshape(n, n, 2).mean(axis=2)
    fy = fine.y.values[:, ::2].reshape(n, 2, n).mean(axis=1)
    return MacVelocity(EdgeFieldX(coarse, fx), EdgeFieldY(coarse, fy))
