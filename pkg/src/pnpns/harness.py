"""Run configuration, the simulation driver, and the convergence study.

A run advances the coupled electro-diffusion/flow stepper from one of three
initial states (the cosine benchmark, a uniform rest state, or arrays from an
``.npz`` file) to ``t_final``, writing one telemetry row per accepted step to
``timeseries.csv`` plus an initial row at step 0, optional field snapshots,
and a ``summary.json`` record.  Every accepted step is re-checked against the
scheme's structural guarantees (mass constancy, positivity, discrete
incompressibility, modified-energy decay); a violation aborts the run with
the partial CSV retained.

The convergence study repeats the benchmark run over a doubling sequence of
resolutions with ``tau = tau_ratio * h`` and measures Cauchy errors: the
finer of each adjacent pair is restricted to the coarser grid and the
difference is recorded in the discrete l2 and max norms, per variable, with
observed orders ``log2(e_h / e_{h/2})`` between consecutive pairs.

All artifact files are written deterministically (fixed column order,
shortest round-trip float formatting), so identical configurations produce
bit-identical output.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .diagnostics import (
    TimeSeriesRow,
    electric_potential,
    energies,
    min_concentration,
)
from .elliptic import KrylovConfig, PoissonContext, project_solenoidal
from .errors import ConfigError, InvariantError
from .grid import (
    CellField,
    EdgeFieldX,
    EdgeFieldY,
    GridSpec,
    MacVelocity,
    div_mac,
    mean,
    norm_inf,
    norm_lp,
    restrict_cell,
    restrict_mac,
)
from .scheme import (
    SchemeParams,
    SchemeState,
    bootstrap_first_step,
    init_from_functions,
    step,
)

__all__ = [
    "TIMESERIES_HEADER",
    "CONVERGENCE_HEADER",
    "CONVERGENCE_VARIABLES",
    "RunConfig",
    "ConvergenceRow",
    "ConvergenceTable",
    "cosine_initial_functions",
    "parse_config",
    "run",
    "converge",
]

TIMESERIES_HEADER = ("step,time,e_h,e_total,e_modified,mass_n,mass_p,"
                     "min_n,min_p,div_u_inf,nonlinear_iters")
CONVERGENCE_HEADER = "h,err_l2,order_l2,err_linf,order_linf"
CONVERGENCE_VARIABLES = ("p", "n", "phi", "u", "v", "psi")

_INITIAL_CHOICES = ("cosine", "uniform")


def cosine_initial_functions() -> dict:
    """The benchmark initial data: smooth cosine concentration bumps that are
    mirror images of each other under x <-> y, a divergence-free shear flow,
    and a single-mode pressure-like field."""

    def p0(x, y):
        return 0.6 + 0.2 * np.cos(np.pi * x) * np.cos(0.5 * np.pi * y)

    def n0(x, y):
        return 0.6 + 0.2 * np.cos(0.5 * np.pi * x) * np.cos(np.pi * y)

    def u0(x, y):
        return -0.25 * np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y)

    def v0(x, y):
        return 0.25 * np.sin(2 * np.pi * x) * np.sin(np.pi * y) ** 2

    def psi0(x, y):
        return np.cos(0.5 * np.pi * x) * np.cos(0.5 * np.pi * y)

    return {"p": p0, "n": n0, "u": u0, "v": v0, "psi": psi0}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated description of one simulation run.

    Exactly one of ``tau`` (explicit step size) and ``tau_ratio``
    (``tau = tau_ratio * h``) is in effect; leaving both unset selects the
    protocol default ``tau_ratio = 0.1``.
    """

    n_cells: int
    t_final: float
    length: float = 4.0
    tau: Optional[float] = None
    tau_ratio: Optional[float] = None
    initial_condition: str = "cosine"
    iter_tol: float = 1e-10
    max_nonlinear_iters: int = 100
    krylov_rel_tolerance: float = 1e-11
    krylov_abs_tolerance: float = 1e-13
    krylov_max_iterations: int = 500
    output_dir: str = "out"
    snapshot_every: int = 0
    debug_first_order: bool = False

    def __post_init__(self):
        if self.tau is not None and self.tau_ratio is not None:
            raise ConfigError("set either tau or tau_ratio, not both")
        if self.tau is None and self.tau_ratio is None:
            object.__setattr__(self, "tau_ratio", 0.1)
        self._demand(self.n_cells >= 4 and self.n_cells % 2 == 0,
                     f"n_cells must be even and >= 4, got {self.n_cells}")
        self._demand(self.length > 0, f"length must be > 0, got {self.length}")
        self._demand(self.t_final > 0,
                     f"t_final must be > 0, got {self.t_final}")
        if self.tau is not None:
            self._demand(self.tau > 0, f"tau must be > 0, got {self.tau}")
        if self.tau_ratio is not None:
            self._demand(self.tau_ratio > 0,
                         f"tau_ratio must be > 0, got {self.tau_ratio}")
        self._demand(self.iter_tol > 0,
                     f"iter_tol must be > 0, got {self.iter_tol}")
        self._demand(self.max_nonlinear_iters >= 1,
                     "max_nonlinear_iters must be >= 1, got "
                     f"{self.max_nonlinear_iters}")
        self._demand(self.krylov_rel_tolerance > 0
                     and self.krylov_abs_tolerance > 0,
                     "Krylov tolerances must be > 0")
        self._demand(self.krylov_max_iterations >= 1,
                     "krylov_max_iterations must be >= 1, got "
                     f"{self.krylov_max_iterations}")
        self._demand(self.snapshot_every >= 0,
                     f"snapshot_every must be >= 0, got {self.snapshot_every}")
        ok = (self.initial_condition in _INITIAL_CHOICES
              or self.initial_condition.startswith("file:"))
        self._demand(ok, "initial_condition must be one of "
                         f"{_INITIAL_CHOICES} or 'file:<path>.npz', got "
                         f"{self.initial_condition!r}")

    @staticmethod
    def _demand(condition: bool, message: str):
        if not condition:
            raise ConfigError(message)

    def resolved_tau(self, h: float) -> float:
        return self.tau if self.tau is not None else self.tau_ratio * h

    def krylov(self) -> KrylovConfig:
        return KrylovConfig(rel_tolerance=self.krylov_rel_tolerance,
                            abs_tolerance=self.krylov_abs_tolerance,
                            max_iterations=self.krylov_max_iterations)


_INT_KEYS = {"n_cells", "max_nonlinear_iters", "krylov_max_iterations",
             "snapshot_every"}
_FLOAT_KEYS = {"t_final", "length", "tau", "tau_ratio", "iter_tol",
               "krylov_rel_tolerance", "krylov_abs_tolerance"}
_STR_KEYS = {"initial_condition", "output_dir"}
_BOOL_KEYS = {"debug_first_order"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _BOOL_KEYS


def parse_config(path) -> RunConfig:
    """Parse a flat TOML file of run settings into a RunConfig.

    Unknown keys and wrongly-typed values are rejected by name; missing
    optional keys take the RunConfig defaults.
    """
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    unknown = sorted(set(raw) - _ALL_KEYS)
    if unknown:
        raise ConfigError(
            f"unknown config keys {unknown}; the recognized keys are "
            f"{sorted(_ALL_KEYS)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _INT_KEYS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {key} must be an integer, "
                                  f"got {value!r}")
        elif key in _FLOAT_KEYS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {key} must be a number, "
                                  f"got {value!r}")
            value = float(value)
        elif key in _STR_KEYS:
            if not isinstance(value, str):
                raise ConfigError(f"config key {key} must be a string, "
                                  f"got {value!r}")
        elif key in _BOOL_KEYS:
            if not isinstance(value, bool):
                raise ConfigError(f"config key {key} must be a boolean, "
                                  f"got {value!r}")
        kwargs[key] = value
    missing = sorted({"n_cells", "t_final"} - set(kwargs))
    if missing:
        raise ConfigError(f"config file {path} lacks required keys "
                          f"{missing}")
    return RunConfig(**kwargs)


# --------------------------------------------------------------------------
# initial states
# --------------------------------------------------------------------------

def _load_file_initial(path: str, grid: GridSpec,
                       ctx: PoissonContext) -> SchemeState:
    try:
        with np.load(path) as data:
            arrays = {key: np.asarray(data[key], dtype=float)
                      for key in data.files}
    except OSError as exc:
        raise ConfigError(f"cannot read initial-condition file {path}: "
                          f"{exc}") from exc
    for key in ("p", "n"):
        if key not in arrays:
            raise ConfigError(f"initial-condition file {path} lacks the "
                              f"required array {key!r}")
    want = (grid.n, grid.n)
    fields = {}
    for key in ("p", "n", "ux", "uy", "psi"):
        if key not in arrays:
            fields[key] = np.zeros(want)
            continue
        arr = arrays[key]
        if arr.shape != want:
            raise ConfigError(
                f"initial-condition array {key!r} must hold N^2 = "
                f"{grid.n}x{grid.n} samples, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"initial-condition array {key!r} contains "
                              "non-finite entries")
        fields[key] = arr
    for key in ("p", "n"):
        low = float(np.min(fields[key]))
        if low <= 0:
            raise ConfigError(f"initial concentration {key!r} must be "
                              f"strictly positive, min is {low!r}")
    gap = abs(float(np.mean(fields["p"]) - np.mean(fields["n"])))
    if gap > 1e-10:
        raise ConfigError(
            f"initial species means differ by {gap!r}; equal masses are "
            "required for the potential solves")
    p = CellField(grid, fields["p"])
    n = CellField(grid, fields["n"])
    psi = CellField(grid, fields["psi"] - fields["psi"].mean())
    u = project_solenoidal(ctx, MacVelocity(EdgeFieldX(grid, fields["ux"]),
                                            EdgeFieldY(grid, fields["uy"])))
    return SchemeState(n_curr=n, p_curr=p, n_prev=n.copy(), p_prev=p.copy(),
                       u_curr=u, u_prev=u.copy(), psi_curr=psi,
                       time=0.0, step_index=0)


def _initial_state(config: RunConfig, grid: GridSpec,
                   ctx: PoissonContext) -> SchemeState:
    selector = config.initial_condition
    if selector == "cosine":
        f = cosine_initial_functions()
        return init_from_functions(grid, f["p"], f["n"], f["u"], f["v"],
                                   f["psi"], ctx)
    if selector == "uniform":
        return init_from_functions(grid,
                                   lambda x, y: 0.6 + 0.0 * x,
                                   lambda x, y: 0.6 + 0.0 * x,
                                   lambda x, y: 0.0 * x,
                                   lambda x, y: 0.0 * x,
                                   lambda x, y: 0.0 * x, ctx)
    return _load_file_initial(selector[len("file:"):], grid, ctx)


# --------------------------------------------------------------------------
# the run driver
# --------------------------------------------------------------------------

def _step_count(t_final: float, tau: float) -> int:
    steps = round(t_final / tau)
    if steps < 1 or not math.isclose(steps * tau, t_final,
                                     rel_tol=1e-8, abs_tol=0.0):
        raise ConfigError(
            f"t_final={t_final!r} is not an integer multiple of "
            f"tau={tau!r}; adjust one of them")
    return steps


def _row_from_state(state: SchemeState, tau: float, ctx: PoissonContext,
                    div_u_inf: float, nonlinear_iters: int) -> TimeSeriesRow:
    e = energies(state, tau, ctx)
    low_n, low_p, _ = min_concentration(state)
    return TimeSeriesRow(step=state.step_index, time=state.time,
                         e_h=e.e_h, e_total=e.e_total,
                         e_modified=e.e_modified,
                         mass_n=mean(state.n_curr), mass_p=mean(state.p_curr),
                         min_n=low_n, min_p=low_p, div_u_inf=div_u_inf,
                         nonlinear_iters=nonlinear_iters)


def _format_row(row: TimeSeriesRow) -> str:
    return ",".join([
        str(row.step), repr(row.time), repr(row.e_h), repr(row.e_total),
        repr(row.e_modified), repr(row.mass_n), repr(row.mass_p),
        repr(row.min_n), repr(row.min_p), repr(row.div_u_inf),
        str(row.nonlinear_iters),
    ])


def _check_invariants(state: SchemeState, row: TimeSeriesRow,
                      mass0_n: float, mass0_p: float,
                      prev_e_modified: float, iter_tol: float,
                      update_norm: float):
    where = f"at step {state.step_index} (t={state.time!r})"
    drift = max(abs(row.mass_n - mass0_n), abs(row.mass_p - mass0_p))
    if drift > 1e-12:
        raise InvariantError(f"species mass drifted by {drift!r} {where}")
    if min(row.min_n, row.min_p) <= 0:
        raise InvariantError(
            f"concentration positivity lost {where}: min_n={row.min_n!r}, "
            f"min_p={row.min_p!r}")
    cap = 1e-10 * max(1.0, norm_inf(state.u_curr) / state.grid.h)
    if row.div_u_inf > cap:
        raise InvariantError(
            f"velocity divergence {row.div_u_inf!r} exceeds {cap!r} {where}")
    if row.e_modified > prev_e_modified + 1e-8:
        raise InvariantError(
            f"modified energy rose from {prev_e_modified!r} to "
            f"{row.e_modified!r} {where}")
    if update_norm > iter_tol:
        raise InvariantError(
            f"recorded update norm {update_norm!r} exceeds the iteration "
            f"tolerance {iter_tol!r} {where}")


def _write_field_csv(path: str, xs: np.ndarray, ys: np.ndarray,
                     values: np.ndarray):
    with open(path, "w") as fh:
        fh.write("i,j,x,y,value\n")
        n_i, n_j = values.shape
        for i in range(n_i):
            for j in range(n_j):
                fh.write(f"{i},{j},{float(xs[i, j])!r},{float(ys[i, j])!r},"
                         f"{float(values[i, j])!r}\n")


def _write_snapshots(state: SchemeState, outdir: str):
    grid = state.grid
    tag = f"step_{state.step_index:06d}"
    cx, cy = grid.cell_xy()
    ex, ey = grid.edge_x_xy()
    fx, fy = grid.edge_y_xy()
    per_field = [
        ("p", cx, cy, state.p_curr.values),
        ("n", cx, cy, state.n_curr.values),
        ("psi", cx, cy, state.psi_curr.values),
        ("ux", ex, ey, state.u_curr.x.values),
        ("uy", fx, fy, state.u_curr.y.values),
    ]
    for name, xs, ys, values in per_field:
        _write_field_csv(os.path.join(outdir, f"{tag}_{name}.csv"),
                         xs, ys, values)


def _scheme_params(config: RunConfig, grid: GridSpec) -> SchemeParams:
    return SchemeParams(tau=config.resolved_tau(grid.h), grid=grid,
                        iter_tol=config.iter_tol,
                        max_nonlinear_iters=config.max_nonlinear_iters,
                        krylov=config.krylov(),
                        first_order_extrapolation=config.debug_first_order)


def _drive(config: RunConfig) -> tuple[SchemeState, dict]:
    """Advance one configured run to t_final, writing artifacts as we go.

    Returns the final state together with the summary record.  The
    time-series CSV is flushed row by row so a failed run keeps its partial
    telemetry.
    """
    grid = GridSpec(config.n_cells, config.length)
    ctx = PoissonContext(grid)
    params = _scheme_params(config, grid)
    n_steps = _step_count(config.t_final, params.tau)
    state = _initial_state(config, grid, ctx)

    os.makedirs(config.output_dir, exist_ok=True)
    snapdir = os.path.join(config.output_dir, "snapshots")
    if config.snapshot_every:
        os.makedirs(snapdir, exist_ok=True)

    row0 = _row_from_state(state, params.tau, ctx,
                           div_u_inf=norm_inf(div_mac(state.u_curr)),
                           nonlinear_iters=0)
    mass0_n, mass0_p = row0.mass_n, row0.mass_p
    prev_e_modified = row0.e_modified
    krylov_total = 0
    nonlinear_total = 0

    csv_path = os.path.join(config.output_dir, "timeseries.csv")
    with open(csv_path, "w") as fh:
        fh.write(TIMESERIES_HEADER + "\n")
        fh.write(_format_row(row0) + "\n")
        fh.flush()
        for k in range(n_steps):
            advance = bootstrap_first_step if k == 0 else step
            state, report = advance(state, params, ctx)
            krylov_total += report.krylov_iters_total
            nonlinear_total += report.nonlinear_iters
            row = _row_from_state(state, params.tau, ctx,
                                  div_u_inf=report.div_u_inf,
                                  nonlinear_iters=report.nonlinear_iters)
            fh.write(_format_row(row) + "\n")
            fh.flush()
            _check_invariants(state, row, mass0_n, mass0_p, prev_e_modified,
                              params.iter_tol, report.final_update_norm)
            prev_e_modified = row.e_modified
            if config.snapshot_every and (
                    state.step_index % config.snapshot_every == 0):
                _write_snapshots(state, snapdir)

    e0, e1 = row0, row
    summary = {
        "n_cells": config.n_cells,
        "length": config.length,
        "tau": params.tau,
        "steps": n_steps,
        "t_final": state.time,
        "initial_condition": config.initial_condition,
        "mass_n": e1.mass_n,
        "mass_p": e1.mass_p,
        "min_n": e1.min_n,
        "min_p": e1.min_p,
        "e_h_initial": e0.e_h,
        "e_h_final": e1.e_h,
        "e_total_initial": e0.e_total,
        "e_total_final": e1.e_total,
        "e_modified_initial": e0.e_modified,
        "e_modified_final": e1.e_modified,
        "krylov_iters_total": krylov_total,
        "nonlinear_iters_total": nonlinear_total,
    }
    with open(os.path.join(config.output_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return state, summary


def run(config: RunConfig) -> dict:
    """Execute one run and return its summary record.

    Artifacts land in ``config.output_dir``: ``timeseries.csv`` (header plus
    a step-0 row and one row per accepted step), ``summary.json``, and
    ``snapshots/`` when requested.  Failures raise; the partial CSV stays.
    """
    _, summary = _drive(config)
    return summary


# --------------------------------------------------------------------------
# the convergence study
# --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ConvergenceRow:
    """One resolution pair: errors on the coarse grid of the pair, orders
    against the previous row (None in the first row)."""

    h: float
    err_l2: float
    order_l2: Optional[float]
    err_linf: float
    order_linf: Optional[float]


@dataclasses.dataclass(frozen=True)
class ConvergenceTable:
    variable: str
    rows: tuple

    def __post_init__(self):
        if self.variable not in CONVERGENCE_VARIABLES:
            raise ConfigError(f"unknown table variable {self.variable!r}")


def _comparison_fields(state: SchemeState, ctx: PoissonContext) -> dict:
    """The six fields entering the Cauchy-error tables, on state's grid."""
    return {
        "p": state.p_curr,
        "n": state.n_curr,
        "phi": electric_potential(state, ctx),
        "u": state.u_curr.x,
        "v": state.u_curr.y,
        "psi": state.psi_curr,
    }


def _restrict_comparison_fields(fields: dict) -> dict:
    coarse_mac = restrict_mac(MacVelocity(fields["u"], fields["v"]))
    out = {key: restrict_cell(fields[key]) for key in ("p", "n", "phi", "psi")}
    out["u"] = coarse_mac.x
    out["v"] = coarse_mac.y
    return out


def _format_order(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def _write_convergence_csv(path: str, table: ConvergenceTable):
    with open(path, "w") as fh:
        fh.write(CONVERGENCE_HEADER + "\n")
        for row in table.rows:
            fh.write(",".join([repr(row.h), repr(row.err_l2),
                               _format_order(row.order_l2), repr(row.err_linf),
                               _format_order(row.order_linf)]) + "\n")


def _render_tables(tables: Sequence[ConvergenceTable], t_final: float) -> str:
    lines = [
        "Cauchy errors at t_final=%s." % repr(t_final),
        "Each row compares a run with the next-finer run (half the mesh",
        "width); the fine solution is restricted to the coarse grid and the",
        "norms are evaluated there.  order = log2(err_h / err_{h/2}).",
    ]
    for table in tables:
        lines.append("")
        lines.append(f"variable {table.variable}")
        lines.append(f"{'h':>12} {'err_l2':>14} {'order_l2':>9} "
                     f"{'err_linf':>14} {'order_linf':>10}")
        for row in table.rows:
            o2 = "---" if row.order_l2 is None else f"{row.order_l2:.3f}"
            oi = "---" if row.order_linf is None else f"{row.order_linf:.3f}"
            lines.append(f"{row.h:>12.6g} {row.err_l2:>14.6e} {o2:>9} "
                         f"{row.err_linf:>14.6e} {oi:>10}")
    return "\n".join(lines) + "\n"


def converge(config: RunConfig, n_list: Sequence[int]) -> list:
    """Cauchy-error study over a doubling resolution sequence.

    Runs the cosine benchmark at every entry of ``n_list`` (each must double
    its predecessor) with ``tau = tau_ratio * h``, then tabulates the
    restricted fine-minus-coarse differences per variable.  Emits
    ``convergence_<var>.csv`` and an aligned ``convergence_tables.txt`` in
    ``config.output_dir``; per-resolution run artifacts land in
    subdirectories.  A single-entry ``n_list`` yields empty tables.
    """
    if len(n_list) == 0:
        raise ConfigError("the convergence study needs at least one "
                          "resolution")
    for a, b in zip(n_list, n_list[1:]):
        if b != 2 * a:
            raise ConfigError(
                f"resolutions must double: {b} does not follow {a}")
    if config.tau is not None:
        raise ConfigError(
            "the convergence study scales the step with the mesh; use "
            "tau_ratio instead of an explicit tau")
    if config.initial_condition != "cosine":
        raise ConfigError(
            "the convergence study is defined for the cosine benchmark "
            f"data, got initial_condition={config.initial_condition!r}")

    os.makedirs(config.output_dir, exist_ok=True)
    pair_errors = {key: [] for key in CONVERGENCE_VARIABLES}
    pair_h = []
    prev_fields = None
    prev_grid = None
    for n_cells in n_list:
        sub = dataclasses.replace(
            config, n_cells=n_cells, snapshot_every=0,
            output_dir=os.path.join(config.output_dir, f"n{n_cells:04d}"))
        state, _ = _drive(sub)
        ctx = PoissonContext(state.grid)
        fields = _comparison_fields(state, ctx)
        if prev_fields is not None:
            restricted = _restrict_comparison_fields(fields)
            for key in CONVERGENCE_VARIABLES:
                diff = prev_fields[key] - restricted[key]
                pair_errors[key].append((norm_lp(diff, 2), norm_inf(diff)))
            pair_h.append(prev_grid.h)
        prev_fields = fields
        prev_grid = state.grid

    tables = []
    for key in CONVERGENCE_VARIABLES:
        rows = []
        for k, (err_l2, err_linf) in enumerate(pair_errors[key]):
            if k == 0:
                order_l2 = order_linf = None
            else:
                prev_l2, prev_linf = pair_errors[key][k - 1]
                order_l2 = math.log2(prev_l2 / err_l2)
                order_linf = math.log2(prev_linf / err_linf)
            rows.append(ConvergenceRow(h=pair_h[k], err_l2=err_l2,
                                       order_l2=order_l2, err_linf=err_linf,
                                       order_linf=order_linf))
        table = ConvergenceTable(variable=key, rows=tuple(rows))
        _write_convergence_csv(
            os.path.join(config.output_dir, f"convergence_{key}.csv"), table)
        tables.append(table)
    with open(os.path.join(config.output_dir,
                           "convergence_tables.txt"), "w") as fh:
        fh.write(_render_tables(tables, config.t_final))
    return tables
