"""Train the five van der Pol observers and score them under noise.

Runs the bundled configs end to end: three fixed-eigenvalue baselines, the
noise-trained observer, and the regularized one, then evaluates every
observer under clean, gaussian, and uniform measurement noise.  Expect a
little under an hour on one core; pass --skip-train to reuse runs/ from an
earlier invocation.
"""

import argparse
import csv
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from odekkl.cli import main  # noqa: E402

ROOT = os.path.join(os.path.dirname(__file__), "..")

TRAININGS = [
    "vanderpol_fixed_fast.json",
    "vanderpol_fixed_mixed.json",
    "vanderpol_fixed_slow.json",
    "vanderpol_noise.json",
    "vanderpol_reg.json",
]


def run(command, config):
    path = os.path.join(ROOT, "configs", config)
    print(f"== {command} {config}")
    code = main([command, "--config", path])
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--skip-train", action="store_true", help="only rerun the evaluation")
    args = ap.parse_args()

    os.chdir(ROOT)
    if not args.skip_train:
        for cfg in TRAININGS:
            run("train", cfg)
    run("eval", "table1_eval.json")

    with open("runs/table1/scenarios.csv") as fh:
        rows = list(csv.DictReader(fh))
    scenarios = sorted({r["scenario"] for r in rows})
    print(f"\n{'observer':<14}" + "".join(f"{s:>14}" for s in scenarios))
    for obs in dict.fromkeys(r["observer"] for r in rows):
        cells = {r["scenario"]: float(r["rmse"]) for r in rows if r["observer"] == obs}
        print(f"{obs:<14}" + "".join(f"{cells[s]:>14.4f}" for s in scenarios))
