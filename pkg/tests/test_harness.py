"""Configuration parsing, the run driver's artifacts and invariant
enforcement, the Cauchy-error study, and the command-line front end."""

import dataclasses
import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from pnpns.cli import main
from pnpns.elliptic import PoissonContext
from pnpns.errors import ConfigError, InvariantError, StepError
from pnpns.grid import GridSpec, div_mac, mean, norm_inf
from pnpns.harness import (
    CONVERGENCE_HEADER,
    TIMESERIES_HEADER,
    RunConfig,
    _check_invariants,
    _initial_state,
    converge,
    cosine_initial_functions,
    parse_config,
    run,
)
from pnpns.diagnostics import TimeSeriesRow
from pnpns.scheme import init_from_functions


def write_config(tmp_path, body: str, name: str = "run.toml") -> str:
    path = tmp_path / name
    path.write_text(body)
    return str(path)


def read_rows(csv_path) -> list:
    lines = open(csv_path).read().splitlines()
    assert lines[0] == TIMESERIES_HEADER
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append({key: (int(value) if key in ("step", "nonlinear_iters")
                           else float(value))
                     for key, value in zip(TIMESERIES_HEADER.split(","),
                                           parts)})
    return rows


class TestParseConfig:
    def test_minimal_file_gets_defaults(self, tmp_path):
        cfg = parse_config(write_config(tmp_path,
                                        "n_cells = 32\nt_final = 0.1\n"))
        assert cfg.n_cells == 32
        assert cfg.t_final == 0.1
        assert cfg.tau is None and cfg.tau_ratio == 0.1
        assert cfg.length == 4.0
        assert cfg.initial_condition == "cosine"
        assert cfg.iter_tol == 1e-10
        assert cfg.snapshot_every == 0
        assert cfg.resolved_tau(0.125) == pytest.approx(0.0125)

    def test_unknown_key_named(self, tmp_path):
        path = write_config(tmp_path,
                            "n_cells = 32\nt_final = 0.1\nwibble = 1\n")
        with pytest.raises(ConfigError, match="wibble"):
            parse_config(path)

    def test_both_step_controls_rejected(self, tmp_path):
        path = write_config(
            tmp_path, "n_cells = 32\nt_final = 0.1\ntau = 0.01\n"
                      "tau_ratio = 0.1\n")
        with pytest.raises(ConfigError, match="not both"):
            parse_config(path)

    def test_missing_required_key(self, tmp_path):
        path = write_config(tmp_path, "n_cells = 32\n")
        with pytest.raises(ConfigError, match="t_final"):
            parse_config(path)

    def test_type_errors_are_named(self, tmp_path):
        path = write_config(tmp_path, 'n_cells = "32"\nt_final = 0.1\n')
        with pytest.raises(ConfigError, match="n_cells"):
            parse_config(path)
        path = write_config(tmp_path, "n_cells = 32\nt_final = true\n")
        with pytest.raises(ConfigError, match="t_final"):
            parse_config(path)
        path = write_config(tmp_path,
                            "n_cells = 32\nt_final = 0.1\n"
                            "debug_first_order = 1\n")
        with pytest.raises(ConfigError, match="debug_first_order"):
            parse_config(path)

    def test_unreadable_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config(str(tmp_path / "absent.toml"))
        path = write_config(tmp_path, "n_cells = = 32\n")
        with pytest.raises(ConfigError, match="malformed"):
            parse_config(path)


class TestRunConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(n_cells=7, t_final=0.1)
        with pytest.raises(ConfigError):
            RunConfig(n_cells=16, t_final=0.0)
        with pytest.raises(ConfigError):
            RunConfig(n_cells=16, t_final=0.1, tau=-0.1)
        with pytest.raises(ConfigError):
            RunConfig(n_cells=16, t_final=0.1, snapshot_every=-1)
        with pytest.raises(ConfigError):
            RunConfig(n_cells=16, t_final=0.1, initial_condition="vortex")

    def test_explicit_tau_wins(self):
        cfg = RunConfig(n_cells=16, t_final=0.1, tau=0.02)
        assert cfg.tau_ratio is None
        assert cfg.resolved_tau(0.25) == 0.02


class TestInitialStates:
    def test_uniform_state(self):
        g = GridSpec(8)
        ctx = PoissonContext(g)
        cfg = RunConfig(n_cells=8, t_final=0.1,
                        initial_condition="uniform")
        state = _initial_state(cfg, g, ctx)
        assert np.all(state.n_curr.values == 0.6)
        assert np.all(state.p_curr.values == 0.6)
        assert norm_inf(state.u_curr) == 0.0
        assert norm_inf(state.psi_curr) == 0.0

    def test_file_round_trip(self, tmp_path):
        g = GridSpec(16)
        ctx = PoissonContext(g)
        f = cosine_initial_functions()
        want = init_from_functions(g, f["p"], f["n"], f["u"], f["v"],
                                   f["psi"], ctx)
        x, y = g.cell_xy()
        ex, ey = g.edge_x_xy()
        fx, fy = g.edge_y_xy()
        path = tmp_path / "init.npz"
        np.savez(path, p=f["p"](x, y), n=f["n"](x, y),
                 ux=f["u"](ex, ey), uy=f["v"](fx, fy), psi=f["psi"](x, y))
        cfg = RunConfig(n_cells=16, t_final=0.1,
                        initial_condition=f"file:{path}")
        state = _initial_state(cfg, g, ctx)
        assert np.allclose(state.p_curr.values, want.p_curr.values,
                           atol=1e-15)
        assert np.allclose(state.u_curr.x.values, want.u_curr.x.values,
                           atol=1e-13)
        assert abs(mean(state.psi_curr)) <= 1e-15
        assert norm_inf(div_mac(state.u_curr)) <= 1e-12
        assert np.array_equal(state.n_curr.values, state.n_prev.values)

    def test_file_defaults_missing_arrays_to_zero(self, tmp_path):
        g = GridSpec(8)
        path = tmp_path / "init.npz"
        np.savez(path, p=np.full((8, 8), 0.7), n=np.full((8, 8), 0.7))
        cfg = RunConfig(n_cells=8, t_final=0.1,
                        initial_condition=f"file:{path}")
        state = _initial_state(cfg, g, PoissonContext(g))
        assert norm_inf(state.u_curr) == 0.0
        assert norm_inf(state.psi_curr) == 0.0

    def test_file_errors(self, tmp_path):
        g = GridSpec(8)
        ctx = PoissonContext(g)

        def state_for(path):
            cfg = RunConfig(n_cells=8, t_final=0.1,
                            initial_condition=f"file:{path}")
            return _initial_state(cfg, g, ctx)

        with pytest.raises(ConfigError, match="cannot read"):
            state_for(tmp_path / "absent.npz")

        path = tmp_path / "short.npz"
        np.savez(path, p=np.full((8, 4), 0.7), n=np.full((8, 8), 0.7))
        with pytest.raises(ConfigError, match=r"N\^2"):
            state_for(path)

        path = tmp_path / "nop.npz"
        np.savez(path, n=np.full((8, 8), 0.7))
        with pytest.raises(ConfigError, match="required array 'p'"):
            state_for(path)

        path = tmp_path / "negative.npz"
        bad = np.full((8, 8), 0.7)
        bad[0, 0] = -0.2
        np.savez(path, p=bad, n=np.full((8, 8), 0.7))
        with pytest.raises(ConfigError, match="strictly positive"):
            state_for(path)

        path = tmp_path / "masses.npz"
        np.savez(path, p=np.full((8, 8), 0.7), n=np.full((8, 8), 0.8))
        with pytest.raises(ConfigError, match="means differ"):
            state_for(path)


class TestRunDriver:
    def test_uniform_run_rows_are_flat(self, tmp_path):
        out = tmp_path / "flat"
        summary = run(RunConfig(n_cells=16, t_final=0.05,
                                initial_condition="uniform",
                                output_dir=str(out)))
        rows = read_rows(out / "timeseries.csv")
        assert [row["step"] for row in rows] == [0, 1, 2]
        assert rows[0]["nonlinear_iters"] == 0
        assert len({row["e_h"] for row in rows}) == 1
        assert len({row["mass_n"] for row in rows}) == 1
        assert all(row["min_p"] == 0.6 for row in rows)
        assert summary["steps"] == 2
        assert summary["e_modified_initial"] == summary["e_modified_final"]

    def test_benchmark_run_telemetry(self, tmp_path):
        out = tmp_path / "bench"
        summary = run(RunConfig(n_cells=16, t_final=0.1,
                                output_dir=str(out)))
        rows = read_rows(out / "timeseries.csv")
        assert len(rows) == summary["steps"] + 1
        times = [row["time"] for row in rows]
        assert all(b > a for a, b in zip(times, times[1:]))
        e_mod = [row["e_modified"] for row in rows]
        assert all(b <= a + 1e-8 for a, b in zip(e_mod, e_mod[1:]))
        assert e_mod[-1] < e_mod[0]
        for row in rows:
            assert row["min_n"] > 0 and row["min_p"] > 0
            assert abs(row["mass_n"] - 0.6) <= 1e-12
            assert abs(row["mass_p"] - 0.6) <= 1e-12
        saved = json.load(open(out / "summary.json"))
        assert saved == summary
        assert saved["min_n"] == rows[-1]["min_n"]
        assert saved["krylov_iters_total"] > 0

    def test_bit_identical_reruns(self, tmp_path):
        cfg = RunConfig(n_cells=16, t_final=0.05,
                        output_dir=str(tmp_path / "a"))
        run(cfg)
        run(dataclasses.replace(cfg, output_dir=str(tmp_path / "b")))
        a = open(tmp_path / "a" / "timeseries.csv", "rb").read()
        b = open(tmp_path / "b" / "timeseries.csv", "rb").read()
        assert a == b
        a = open(tmp_path / "a" / "summary.json", "rb").read()
        b = open(tmp_path / "b" / "summary.json", "rb").read()
        assert a == b

    def test_snapshots(self, tmp_path):
        out = tmp_path / "snaps"
        run(RunConfig(n_cells=8, t_final=0.2, snapshot_every=2,
                      output_dir=str(out)))
        snapdir = out / "snapshots"
        names = sorted(os.listdir(snapdir))
        assert "step_000002_p.csv" in names
        assert "step_000004_ux.csv" in names
        assert not any("step_000001" in name or "step_000003" in name
                       for name in names)
        lines = open(snapdir / "step_000002_p.csv").read().splitlines()
        assert lines[0] == "i,j,x,y,value"
        assert len(lines) == 1 + 64
        i, j, x, y, value = lines[1].split(",")
        assert (i, j) == ("0", "0")
        assert float(x) == -1.75 and float(y) == -1.75  # cell center
        ux0 = open(snapdir / "step_000002_ux.csv").read().splitlines()[1]
        assert float(ux0.split(",")[2]) == -2.0  # edge abscissa

    def test_indivisible_t_final_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="integer multiple"):
            run(RunConfig(n_cells=16, t_final=0.1, tau=0.03,
                          output_dir=str(tmp_path / "x")))

    def test_step_failure_keeps_partial_csv(self, tmp_path):
        out = tmp_path / "fail"
        with pytest.raises(StepError):
            run(RunConfig(n_cells=16, t_final=0.05, max_nonlinear_iters=1,
                          output_dir=str(out)))
        rows = read_rows(out / "timeseries.csv")
        assert [row["step"] for row in rows] == [0]
        assert not (out / "summary.json").exists()


class TestInvariantChecks:
    def make_row(self, state, **overrides):
        base = dict(step=state.step_index, time=state.time, e_h=-29.0,
                    e_total=-29.0, e_modified=-29.0, mass_n=0.6, mass_p=0.6,
                    min_n=0.5, min_p=0.5, div_u_inf=0.0, nonlinear_iters=3)
        base.update(overrides)
        return TimeSeriesRow(**base)

    @pytest.fixture()
    def state(self):
        g = GridSpec(8)
        f = cosine_initial_functions()
        return init_from_functions(g, f["p"], f["n"], f["u"], f["v"],
                                   f["psi"], PoissonContext(g))

    def test_accepts_clean_row(self, state):
        row = self.make_row(state)
        _check_invariants(state, row, 0.6, 0.6, -29.0 + 1e-9, 1e-10, 1e-12)

    def test_mass_drift(self, state):
        row = self.make_row(state, mass_n=0.6 + 1e-11)
        with pytest.raises(InvariantError, match="mass drifted"):
            _check_invariants(state, row, 0.6, 0.6, -29.0, 1e-10, 1e-12)

    def test_positivity(self, state):
        row = self.make_row(state, min_p=0.0)
        with pytest.raises(InvariantError, match="positivity"):
            _check_invariants(state, row, 0.6, 0.6, -29.0, 1e-10, 1e-12)

    def test_divergence(self, state):
        row = self.make_row(state, div_u_inf=1e-6)
        with pytest.raises(InvariantError, match="divergence"):
            _check_invariants(state, row, 0.6, 0.6, -29.0, 1e-10, 1e-12)

    def test_energy_rise(self, state):
        row = self.make_row(state, e_modified=-28.0)
        with pytest.raises(InvariantError, match="energy rose"):
            _check_invariants(state, row, 0.6, 0.6, -29.0, 1e-10, 1e-12)

    def test_update_norm(self, state):
        row = self.make_row(state)
        with pytest.raises(InvariantError, match="update norm"):
            _check_invariants(state, row, 0.6, 0.6, -29.0, 1e-10, 1e-8)


class TestConverge:
    def test_small_study_artifacts(self, tmp_path):
        out = tmp_path / "conv"
        tables = converge(RunConfig(n_cells=8, t_final=0.1,
                                    output_dir=str(out)), [8, 16, 32])
        by_var = {t.variable: t for t in tables}
        assert sorted(by_var) == ["n", "p", "phi", "psi", "u", "v"]
        # mirror-image initial data makes the two species' errors identical
        for rp, rn in zip(by_var["p"].rows, by_var["n"].rows):
            assert rp.err_l2 == pytest.approx(rn.err_l2, rel=1e-12)
            assert rp.err_linf == pytest.approx(rn.err_linf, rel=1e-12)
        for ru, rv in zip(by_var["u"].rows, by_var["v"].rows):
            assert ru.err_l2 == pytest.approx(rv.err_l2, rel=1e-12)
        assert by_var["p"].rows[0].order_l2 is None
        assert by_var["p"].rows[0].h == 0.5
        assert by_var["p"].rows[1].h == 0.25
        assert (out / "convergence_tables.txt").exists()
        for name in ("n0008", "n0016", "n0032"):
            assert (out / name / "timeseries.csv").exists()

    def test_orders_recomputable_from_csv(self, tmp_path):
        out = tmp_path / "conv"
        converge(RunConfig(n_cells=8, t_final=0.1, output_dir=str(out)),
                 [8, 16, 32])
        lines = open(out / "convergence_p.csv").read().splitlines()
        assert lines[0] == CONVERGENCE_HEADER
        first = lines[1].split(",")
        second = lines[2].split(",")
        assert first[2] == "" and first[4] == ""
        order = math.log2(float(first[1]) / float(second[1]))
        assert float(second[2]) == pytest.approx(order, abs=1e-12)
        order_inf = math.log2(float(first[3]) / float(second[3]))
        assert float(second[4]) == pytest.approx(order_inf, abs=1e-12)

    def test_single_resolution_gives_empty_tables(self, tmp_path):
        out = tmp_path / "single"
        tables = converge(RunConfig(n_cells=16, t_final=0.1,
                                    output_dir=str(out)), [16])
        assert all(t.rows == () for t in tables)
        lines = open(out / "convergence_p.csv").read().splitlines()
        assert lines == [CONVERGENCE_HEADER]

    def test_config_errors(self, tmp_path):
        cfg = RunConfig(n_cells=8, t_final=0.1,
                        output_dir=str(tmp_path / "x"))
        with pytest.raises(ConfigError, match="double"):
            converge(cfg, [8, 12])
        with pytest.raises(ConfigError, match="at least one"):
            converge(cfg, [])
        with pytest.raises(ConfigError, match="tau_ratio"):
            converge(dataclasses.replace(cfg, tau=0.01, tau_ratio=None),
                     [8, 16])
        with pytest.raises(ConfigError, match="cosine"):
            converge(dataclasses.replace(cfg, initial_condition="uniform"),
                     [8, 16])


class TestFirstOrderControl:
    def test_degraded_mode_loses_an_order_where_it_can(self, tmp_path):
        # The current-level coefficient mode commits an O(tau) error.  With
        # tau = 0.4 h and an early comparison time the ion and potential
        # orders collapse while the velocity stays second order: the lagged
        # coefficients enter the momentum balance almost entirely as a
        # gradient, which the pressure projection removes again.
        protocol = dict(n_cells=64, t_final=0.1, tau_ratio=0.4)
        degraded = converge(RunConfig(**protocol, debug_first_order=True,
                                      output_dir=str(tmp_path / "deg")),
                            [64, 128, 256])
        healthy = converge(RunConfig(**protocol,
                                     output_dir=str(tmp_path / "ok")),
                           [64, 128, 256])
        deg = {t.variable: t.rows[-1].order_l2 for t in degraded}
        ok = {t.variable: t.rows[-1].order_l2 for t in healthy}
        assert deg["p"] < 1.6 and deg["n"] < 1.6 and deg["phi"] < 1.6
        assert 1.8 <= ok["p"] <= 2.4 and 1.8 <= ok["phi"] <= 2.4
        assert abs(deg["u"] - ok["u"]) < 0.1
        assert ok["u"] > 1.9


def cli_subprocess(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "pnpns.cli", *args],
                          capture_output=True, text=True, cwd=cwd)
    return proc.returncode, proc.stdout, proc.stderr


class TestCli:
    def test_run_success(self, tmp_path):
        cfg = write_config(tmp_path, "n_cells = 16\nt_final = 0.05\n"
                                     'initial_condition = "uniform"\n')
        out = tmp_path / "ok"
        code, stdout, stderr = cli_subprocess(
            "run", "--config", cfg, "--out", str(out), cwd=tmp_path)
        assert code == 0, stderr
        assert "timeseries.csv" in stdout
        assert (out / "timeseries.csv").exists()
        assert (out / "summary.json").exists()

    def test_out_and_snapshot_overrides(self, tmp_path):
        cfg = write_config(tmp_path, "n_cells = 8\nt_final = 0.2\n"
                                     'output_dir = "ignored"\n')
        out = tmp_path / "chosen"
        code, _, stderr = cli_subprocess(
            "run", "--config", cfg, "--out", str(out),
            "--snapshot-every", "2", cwd=tmp_path)
        assert code == 0, stderr
        assert (out / "snapshots" / "step_000002_p.csv").exists()
        assert not (tmp_path / "ignored").exists()

    def test_config_error_exit_code(self, tmp_path):
        cfg = write_config(tmp_path, "n_cells = 16\nt_final = 0.05\n"
                                     "wibble = 3\n")
        code, stdout, stderr = cli_subprocess("run", "--config", cfg,
                                              cwd=tmp_path)
        assert code == 2
        assert "wibble" in stderr
        code, _, stderr = cli_subprocess(
            "run", "--config", str(tmp_path / "absent.toml"), cwd=tmp_path)
        assert code == 2

    def test_solver_failure_exit_code(self, tmp_path):
        cfg = write_config(tmp_path, "n_cells = 16\nt_final = 0.05\n"
                                     "max_nonlinear_iters = 1\n")
        code, _, stderr = cli_subprocess("run", "--config", cfg,
                                         "--out", str(tmp_path / "x"),
                                         cwd=tmp_path)
        assert code == 3
        assert "solver failure" in stderr

    def test_invariant_violation_exit_code(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path, "n_cells = 16\nt_final = 0.05\n")

        def explode(config):
            raise InvariantError("synthetic violation")

        monkeypatch.setattr("pnpns.cli.run", explode)
        code = main(["run", "--config", cfg])
        assert code == 4

    def test_bad_n_list(self, tmp_path):
        cfg = write_config(tmp_path, "n_cells = 8\nt_final = 0.1\n")
        code, _, stderr = cli_subprocess(
            "converge", "--config", cfg, "--n", "8,twelve", cwd=tmp_path)
        assert code == 2
        assert "comma-separated" in stderr

    def test_converge_subcommand(self, tmp_path):
        cfg = write_config(tmp_path, "n_cells = 8\nt_final = 0.1\n")
        out = tmp_path / "conv"
        code, stdout, stderr = cli_subprocess(
            "converge", "--config", cfg, "--n", "8,16", "--out", str(out),
            cwd=tmp_path)
        assert code == 0, stderr
        assert (out / "convergence_psi.csv").exists()
        assert "1 resolution pairs" in stdout
