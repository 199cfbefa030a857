#!/usr/bin/env python3
"""Measure the scheme's convergence order by grid refinement.

Runs the cosine benchmark on a sequence of doubling resolutions with the
time step tied to the mesh (tau = 0.1 h), computes Cauchy errors between
consecutive resolutions on the shared coarse grid, and prints the observed
orders.  Every field -- both concentrations, the electric potential, both
velocity components, and the pressure potential -- should come out close
to second order.

Takes about five seconds with the default resolutions [16, 32, 64]; pass
``--fine`` for the larger [32, 64, 128] study.
"""

import argparse
import pathlib
import tempfile

from pnpns.harness import RunConfig, converge


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fine", action="store_true",
                    help="use resolutions 32,64,128 instead of 16,32,64")
    args = ap.parse_args()
    n_list = [32, 64, 128] if args.fine else [16, 32, 64]

    with tempfile.TemporaryDirectory() as tmp:
        tables = converge(RunConfig(n_cells=n_list[0], t_final=0.1,
                                    tau_ratio=0.1, output_dir=tmp),
                          n_list)
        text = pathlib.Path(tmp, "convergence_tables.txt").read_text()

    print(f"resolutions {n_list}, tau = 0.1 h, t_final = 0.1")
    print()
    print(text)
    finest = {t.variable: t.rows[-1] for t in tables}
    print("observed l2 orders on the finest pair:")
    for var in ("p", "n", "phi", "u", "v", "psi"):
        print(f"  {var:>3}: {finest[var].order_l2:.3f}")


if __name__ == "__main__":
    main()
