"""Fit the partially-known linear plant's drift correction and check it.

Trains the Luenberger-style observer from configs/example1_luenberger.json,
then replays it against a fresh initial condition the training set never
saw and reports the worst estimation error after the transient has died.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from odekkl.cli import main  # noqa: E402
from odekkl.integrate import TimeGrid, rk4_solve  # noqa: E402
from odekkl.observer import load_observer, run_observer  # noqa: E402
from odekkl.systems import make_example1  # noqa: E402

ROOT = os.path.join(os.path.dirname(__file__), "..")

if __name__ == "__main__":
    os.chdir(ROOT)
    code = main(["train", "--config", "configs/example1_luenberger.json"])
    if code != 0:
        sys.exit(code)

    obs = load_observer("runs/example1/observer.json")

    sys_ = make_example1()
    grid = TimeGrid(0.0, 50.0, 0.02)
    x0 = np.array([1.5, -2.0])  # outside the sampled training set
    traj = rk4_solve(sys_.drift, x0, grid)
    ys = sys_.output(traj.states)
    est = run_observer(obs, ys, np.zeros(2), grid)

    err = np.linalg.norm(est.states - traj.states, axis=1)
    tail = err[grid.times() > 10.0]
    print(f"held-out x0 = {x0.tolist()}")
    print(f"max error for t > 10s: {tail.max():.3e}")
    print(f"final error:           {err[-1]:.3e}")
