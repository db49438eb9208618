"""Duffing study: train on two domain sizes, map generalization, add forcing.

Four stages, each driven by a bundled config:
  1. train the small-domain observer (states sampled from [-1, 1]^2)
  2. train the large-domain observer ([-3, 3]^2)
  3. sweep a 9x9 grid of initial conditions over [-4, 4]^2 with the
     large-domain observer and write the per-IC error map
  4. simulate the forced plant (u = cos 12t) with the small observer riding
     along, which exercises the forward-map correction in the latent drift

Training both observers takes roughly half an hour; --skip-train reuses
existing runs/.
"""

import argparse
import csv
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from odekkl.cli import main  # noqa: E402

ROOT = os.path.join(os.path.dirname(__file__), "..")


def run(argv):
    print("== odekkl " + " ".join(argv))
    code = main(argv)
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args()

    os.chdir(ROOT)
    if not args.skip_train:
        run(["train", "--config", "configs/duffing_small.json"])
        run(["train", "--config", "configs/duffing_big.json"])
    run(["genmap", "--config", "configs/duffing_genmap.json"])
    run(["simulate", "--config", "configs/duffing_excited.json"])

    with open("runs/duffing_genmap/genmap.csv") as fh:
        rows = list(csv.DictReader(fh))
    inside = [float(r["rmse"]) for r in rows
              if abs(float(r["x1_0"])) <= 3 and abs(float(r["x2_0"])) <= 3]
    outside = [float(r["rmse"]) for r in rows
               if abs(float(r["x1_0"])) > 3 or abs(float(r["x2_0"])) > 3]
    print(f"\ngenmap: {len(inside)} ICs inside the training box, {len(outside)} outside")
    print(f"median rmse inside:  {sorted(inside)[len(inside) // 2]:.4f}")
    print(f"median rmse outside: {sorted(outside)[len(outside) // 2]:.4f}")

    truth = np.genfromtxt("runs/excited/trajectory.csv", delimiter=",", names=True)
    est = np.genfromtxt("runs/excited/estimate.csv", delimiter=",", names=True)
    diff = np.stack([truth["x1"] - est["x1"], truth["x2"] - est["x2"]], axis=1)
    print(f"forced-run rmse:     {np.sqrt(np.mean(np.sum(diff ** 2, axis=1))):.4f}")
