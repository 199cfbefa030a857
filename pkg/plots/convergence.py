#!/usr/bin/env python3
"""Plot grid-refinement errors from one or more convergence CSV tables.

Usage::

    python3 plots/convergence.py <convergence_*.csv ...> <outdir>

Each input table has the header ``h,err_l2,order_l2,err_linf,order_linf``
(one row per resolution; the order columns are blank in the first row).
The script writes ``convergence.png`` into ``outdir``: side-by-side
log2-log2 panels of the l2 and max-norm errors against h, one series per
input file, with a slope-2 reference line for comparison.

Series labels come from the file names (``convergence_u.csv`` -> ``u``).
Tables with fewer than two data rows cannot show a trend and are skipped
with a warning; if nothing remains the script is a no-op.  A missing or
malformed column is a schema error naming the column (exit 1).
"""

import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

REQUIRED = ("h", "err_l2", "err_linf")


class SchemaError(Exception):
    """The CSV does not provide the columns this script plots."""


def read_table(path):
    """Return (h, err_l2, err_linf) float lists from one convergence CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for name in REQUIRED:
            if name not in header:
                raise SchemaError(
                    f"{path} is missing required column '{name}'")
        columns = {name: [] for name in REQUIRED}
        for lineno, row in enumerate(reader, start=2):
            for name in REQUIRED:
                value = row.get(name)
                if value is None or value == "":
                    raise SchemaError(
                        f"{path}:{lineno} has no value for column '{name}'")
                try:
                    columns[name].append(float(value))
                except ValueError:
                    raise SchemaError(
                        f"{path}:{lineno} column '{name}' is not a number: "
                        f"{value!r}") from None
    return columns["h"], columns["err_l2"], columns["err_linf"]


def series_label(path):
    stem = os.path.splitext(os.path.basename(path))[0]
    prefix = "convergence_"
    return stem[len(prefix):] if stem.startswith(prefix) else stem


def plot_tables(tables, out_path):
    """Render the error-vs-h panels.  ``tables`` maps label -> (h, l2, linf)."""
    fig, (ax_l2, ax_inf) = plt.subplots(1, 2, figsize=(10.0, 4.5),
                                        sharex=True, sharey=True)
    h_all = np.concatenate([t[0] for t in tables.values()])
    err_all = np.concatenate([t[1] for t in tables.values()]
                             + [t[2] for t in tables.values()])
    for label, (h, err_l2, err_linf) in sorted(tables.items()):
        ax_l2.plot(np.log2(h), np.log2(err_l2), marker="o", label=label)
        ax_inf.plot(np.log2(h), np.log2(err_linf), marker="s", label=label)
    # slope-2 reference anchored near the coarsest, largest error
    h_ref = np.array([h_all.min(), h_all.max()])
    e_ref = err_all.max() * (h_ref / h_all.max()) ** 2
    for ax, title in ((ax_l2, "l2 error"), (ax_inf, "max error")):
        ax.plot(np.log2(h_ref), np.log2(e_ref), color="gray",
                linestyle="--", label="slope 2")
        ax.set_xlabel("log2 h")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend()
    ax_l2.set_ylabel("log2 error")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) < 2:
        print("usage: convergence.py <convergence_*.csv ...> <outdir>",
              file=sys.stderr)
        return 1
    csv_paths, outdir = argv[:-1], argv[-1]
    tables = {}
    for path in csv_paths:
        try:
            h, err_l2, err_linf = read_table(path)
        except OSError as exc:
            print(f"cannot read {path}: {exc}", file=sys.stderr)
            return 1
        except SchemaError as exc:
            print(f"schema error: {exc}", file=sys.stderr)
            return 1
        if len(h) < 2:
            print(f"warning: {path} has fewer than two data rows; skipping",
                  file=sys.stderr)
            continue
        tables[series_label(path)] = (h, err_l2, err_linf)
    if not tables:
        print("warning: nothing to plot", file=sys.stderr)
        return 0
    os.makedirs(outdir, exist_ok=True)
    out_path = os.path.join(outdir, "convergence.png")
    plot_tables(tables, out_path)
    print(f"wrote convergence.png to {outdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
