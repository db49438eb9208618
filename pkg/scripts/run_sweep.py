"""Sweep eigenvalue magnitudes for the linear rotation plant.

For each scaling k the observer dynamics use k * (base eigenvalues) and the
exact Sylvester transform for that speed, so the sweep isolates the filter
trade-off: faster latent decay shortens convergence but amplifies the
measurement noise baked into the run.  Finishes in a few seconds.
"""

import csv
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from odekkl.cli import main  # noqa: E402

ROOT = os.path.join(os.path.dirname(__file__), "..")

if __name__ == "__main__":
    os.chdir(ROOT)
    code = main(["sweep", "--config", "configs/eigenvalue_sweep.json"])
    if code != 0:
        sys.exit(code)

    with open("runs/sweep/sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'k':>4}{'convergence_time':>20}{'steady_state_error':>22}")
    for r in rows:
        print(f"{float(r['k']):>4.0f}{float(r['convergence_time']):>20.4f}"
              f"{float(r['steady_state_error']):>22.6f}")
