#!/usr/bin/env python3
"""Plot energy/mass evolution and positivity margin from a run's timeseries CSV.

Usage::

    python3 plots/timeseries.py <timeseries.csv> <outdir>

Reads the solver's per-step telemetry and writes two raster images into
``outdir``:

* ``energy_mass.png`` -- stacked panels of the total energy ``e_total`` and
  the positive-species mass ``mass_p`` against time;
* ``positivity.png`` -- the smaller of ``min_n``/``min_p`` against time with
  a zero reference line, so a positivity failure would be visible as a
  crossing.

The script only transforms CSV columns; it never recomputes physics.  A
missing or malformed column is a schema error naming the column (exit 1).
"""

import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

REQUIRED = ("time", "e_total", "mass_p", "min_n", "min_p")


class SchemaError(Exception):
    """The CSV does not provide the columns this script plots."""


def read_timeseries(path):
    """Return a dict of float lists for the REQUIRED columns of ``path``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for name in REQUIRED:
            if name not in header:
                raise SchemaError(
                    f"{path} is missing required column '{name}'")
        data = {name: [] for name in REQUIRED}
        for lineno, row in enumerate(reader, start=2):
            for name in REQUIRED:
                value = row.get(name)
                if value is None or value == "":
                    raise SchemaError(
                        f"{path}:{lineno} has no value for column '{name}'")
                try:
                    data[name].append(float(value))
                except ValueError:
                    raise SchemaError(
                        f"{path}:{lineno} column '{name}' is not a number: "
                        f"{value!r}") from None
    return data


def plot_energy_mass(data, out_path):
    fig, (ax_e, ax_m) = plt.subplots(2, 1, sharex=True, figsize=(6.0, 6.0))
    ax_e.plot(data["time"], data["e_total"], color="tab:blue")
    ax_e.set_ylabel("total energy")
    ax_e.grid(True, alpha=0.3)
    ax_m.plot(data["time"], data["mass_p"], color="tab:green")
    ax_m.set_ylabel("mass of p")
    ax_m.set_xlabel("time")
    ax_m.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_positivity(data, out_path):
    floor = [min(a, b) for a, b in zip(data["min_n"], data["min_p"])]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(data["time"], floor, color="tab:red",
            label="min over both species")
    ax.axhline(0.0, color="black", linewidth=0.8, linestyle="--",
               label="zero")
    ax.set_xlabel("time")
    ax.set_ylabel("minimum concentration")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: timeseries.py <timeseries.csv> <outdir>",
              file=sys.stderr)
        return 1
    csv_path, outdir = argv
    try:
        data = read_timeseries(csv_path)
    except OSError as exc:
        print(f"cannot read {csv_path}: {exc}", file=sys.stderr)
        return 1
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(outdir, exist_ok=True)
    plot_energy_mass(data, os.path.join(outdir, "energy_mass.png"))
    plot_positivity(data, os.path.join(outdir, "positivity.png"))
    print(f"wrote energy_mass.png and positivity.png to {outdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
