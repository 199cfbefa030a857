"""Command-line front end.

``pnpns run --config <file>`` advances one configured simulation;
``pnpns converge --config <file> --n 32,64,128`` runs the Cauchy-error
study.  Exit codes: 0 success, 2 configuration problem, 3 solver failure,
4 post-step invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from typing import Optional, Sequence

from .errors import ConfigError, InvariantError, SolverFailure
from .harness import converge, parse_config, run

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnpns",
        description="Positivity-preserving, energy-stable solver for "
                    "two-species electro-diffusion in an incompressible "
                    "fluid on a periodic square.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser(
        "run", help="advance one configured simulation to t_final")
    p_run.add_argument("--config", required=True,
                       help="TOML run-configuration file")
    p_run.add_argument("--out", default=None,
                       help="output directory (overrides the config)")
    p_run.add_argument("--snapshot-every", type=int, default=None,
                       metavar="K", help="write field snapshots every K "
                                         "steps (overrides the config)")
    p_run.add_argument("--debug-first-order", action="store_true",
                       help="replace the extrapolated half-step values with "
                            "current-level ones (order-degradation control)")

    p_conv = sub.add_parser(
        "converge", help="Cauchy-error convergence study over a doubling "
                         "resolution sequence")
    p_conv.add_argument("--config", required=True,
                        help="TOML run-configuration file")
    p_conv.add_argument("--n", required=True,
                        help="comma-separated doubling resolutions, "
                             "e.g. 32,64,128")
    p_conv.add_argument("--out", default=None,
                        help="output directory (overrides the config)")
    p_conv.add_argument("--debug-first-order", action="store_true",
                        help="run the study with the degraded extrapolation")
    return parser


def _parse_n_list(text: str) -> list:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--n expects comma-separated integers, got "
                          f"{text!r}") from exc
    if not values:
        raise ConfigError(f"--n expects at least one resolution, got {text!r}")
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = parse_config(args.config)
        overrides = {}
        if args.out is not None:
            overrides["output_dir"] = args.out
        if getattr(args, "snapshot_every", None) is not None:
            overrides["snapshot_every"] = args.snapshot_every
        if args.debug_first_order:
            overrides["debug_first_order"] = True
        if overrides:
            config = dataclasses.replace(config, **overrides)
        if args.command == "run":
            summary = run(config)
            print(f"wrote {config.output_dir}/timeseries.csv "
                  f"({summary['steps']} steps, tau={summary['tau']!r}, "
                  f"e_modified {summary['e_modified_initial']!r} -> "
                  f"{summary['e_modified_final']!r})")
        else:
            tables = converge(config, _parse_n_list(args.n))
            pairs = len(tables[0].rows) if tables else 0
            print(f"wrote {config.output_dir}/convergence_<var>.csv "
                  f"({pairs} resolution pairs)")
    except ConfigError as exc:
        print(f"pnpns: configuration error: {exc}", file=sys.stderr)
        return 2
    except SolverFailure as exc:
        print(f"pnpns: solver failure: {exc}", file=sys.stderr)
        return 3
    except InvariantError as exc:
        print(f"pnpns: invariant violation: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
