"""Fixed-step RK4 integration on uniform time grids, plus trajectory I/O.

The solver is deliberately fixed-step so that training can differentiate
through the exact discrete computation; everything downstream (losses,
gradients, evaluation metrics) lives on the same grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .systems import ExcitationSpec, NoiseSpec, SystemSpec, sample_noise

Array = np.ndarray


class DivergenceError(RuntimeError):
    """Raised when an integration step produces a non-finite state."""

    def __init__(self, step_index: int, t: float):
        super().__init__(f"state became non-finite at step {step_index} (t={t:g})")
        self.step_index = step_index
        self.t = t


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0, t0+h, ..., tf; (tf - t0) must be a multiple of h."""

    t0: float
    tf: float
    h: float

    def __post_init__(self):
        if not (self.tf > self.t0):
            raise ValueError("need tf > t0")
        if not (self.h > 0):
            raise ValueError("need h > 0")
        n = (self.tf - self.t0) / self.h
        if abs(n - round(n)) > 1e-9 * max(1.0, abs(n)):
            raise ValueError(f"grid span {self.tf - self.t0} is not a multiple of h={self.h}")

    @property
    def n_steps(self) -> int:
        return round((self.tf - self.t0) / self.h)

    def times(self) -> Array:
        return self.t0 + self.h * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class Trajectory:
    """States sampled on a grid, optionally with measured outputs and inputs."""

    grid: TimeGrid
    states: Array
    outputs: Array | None = None
    inputs: Array | None = None

    def __post_init__(self):
        n_rows = self.grid.n_steps + 1
        st = np.asarray(self.states, dtype=float)
        if st.ndim != 2 or st.shape[0] != n_rows:
            raise ValueError(f"states must be ({n_rows}, d), got {st.shape}")
        if not np.all(np.isfinite(st)):
            raise ValueError("trajectory states contain non-finite values")
        object.__setattr__(self, "states", st)
        for name in ("outputs", "inputs"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.ndim != 2 or arr.shape[0] != n_rows:
                raise ValueError(f"{name} must be ({n_rows}, d), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"trajectory {name} contain non-finite values")
            object.__setattr__(self, name, arr)


def rk4_step(f: Callable[[float, Array], Array], t: float, x: Array, h: float) -> Array:
    """One classical Runge-Kutta step from (t, x) to t + h."""
    k1 = f(t, x)
    k2 = f(t + h / 2.0, x + (h / 2.0) * k1)
    k3 = f(t + h / 2.0, x + (h / 2.0) * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def solve_ivp(f: Callable[[float, Array], Array], x0: Array, grid: TimeGrid) -> Trajectory:
    """Integrate dx/dt = f(t, x) over the grid; raises DivergenceError on blowup."""
    x0 = np.asarray(x0, dtype=float)
    states = np.empty((grid.n_steps + 1,) + x0.shape)
    states[0] = x0
    t = grid.t0
    x = x0
    for k in range(grid.n_steps):
        x = rk4_step(f, t, x, grid.h)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k + 1, t + grid.h)
        states[k + 1] = x
        t = grid.t0 + (k + 1) * grid.h
    return Trajectory(grid=grid, states=states)


def solve_ivp_batch(f: Callable[[float, Array], Array], x0: Array, grid: TimeGrid) -> Array:
    """Vectorized solve for a batch of initial states.

    ``x0`` has shape (B, d); the drift must broadcast over the batch axis.
    Returns states of shape (B, n_steps + 1, d).
    """
    x0 = np.asarray(x0, dtype=float)
    B, d = x0.shape
    out = np.empty((B, grid.n_steps + 1, d))
    out[:, 0] = x0
    x = x0
    for k in range(grid.n_steps):
        t = grid.t0 + k * grid.h
        x = rk4_step(f, t, x, grid.h)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k + 1, t + grid.h)
        out[:, k + 1] = x
    return out


def solve_coupled(
    sys: SystemSpec,
    obs_drift: Callable[[float, Array, Array, Array], Array],
    x0: Array,
    z0: Array,
    grid: TimeGrid,
    noise: NoiseSpec | None = None,
    excitation: ExcitationSpec | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Trajectory, Trajectory]:
    """Co-integrate plant and observer with the observer fed measured output.

    The observer drift has signature ``obs_drift(t, z, y, u)``.  Measurement
    noise corrupts y before it reaches the observer; process noise enters the
    plant drift.  Either way a fresh draw is made per step and held constant
    across the four RK4 stages of that step, so a given seed yields one
    well-defined disturbance realization.

    Returns (plant trajectory, observer trajectory).  The plant trajectory's
    ``outputs`` are the measured (possibly corrupted) values the observer saw.
    """
    noise = noise or NoiseSpec()
    excitation = excitation or ExcitationSpec()
    if noise.is_active and rng is None:
        raise ValueError("noise requires an rng")
    x0 = np.asarray(x0, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    n = grid.n_steps

    meas = noise if noise.target == "measurement" else None
    proc = noise if noise.target == "process" else None
    # one measurement draw per grid point (draw k is active during step k),
    # one process draw per step
    V = sample_noise(meas, sys.n_y, rng, n=n + 1) if meas and meas.is_active else np.zeros((n + 1, sys.n_y))
    W = sample_noise(proc, sys.n_x, rng, n=n) if proc and proc.is_active else np.zeros((n, sys.n_x))

    use_u = excitation.is_active and sys.input_map is not None

    X = np.empty((n + 1, sys.n_x))
    Z = np.empty((n + 1, z0.shape[0]))
    Y = np.empty((n + 1, sys.n_y))
    U = np.empty((n + 1, sys.n_u)) if use_u else None
    X[0], Z[0] = x0, z0
    Y[0] = sys.output(x0) + V[0]
    if use_u:
        U[0] = excitation(grid.t0)

    x, z = x0, z0
    for k in range(n):
        t = grid.t0 + k * grid.h
        v_k, w_k = V[k], W[k]

        def f(tau, xz):
            xs, zs = xz[: sys.n_x], xz[sys.n_x :]
            dx = sys.drift(tau, xs) + w_k
            u = excitation(tau) if use_u else np.zeros(max(sys.n_u, 1))
            if use_u:
                dx = dx + sys.input_map(xs) @ u
            y = sys.output(xs) + v_k
            dz = obs_drift(tau, zs, y, u)
            return np.concatenate([dx, dz])

        nxt = rk4_step(f, t, np.concatenate([x, z]), grid.h)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(k + 1, t + grid.h)
        x, z = nxt[: sys.n_x], nxt[sys.n_x :]
        X[k + 1], Z[k + 1] = x, z
        Y[k + 1] = sys.output(x) + V[k + 1]
        if use_u:
            U[k + 1] = excitation(t + grid.h)

    traj_x = Trajectory(grid=grid, states=X, outputs=Y, inputs=U)
    traj_z = Trajectory(grid=grid, states=Z)
    return traj_x, traj_z


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Write t, states, and any outputs/inputs as CSV with LF line endings."""
    t = traj.grid.times()
    cols = [t[:, None], traj.states]
    header = ["t"] + [f"x{i + 1}" for i in range(traj.states.shape[1])]
    if traj.outputs is not None:
        cols.append(traj.outputs)
        header += [f"y{i + 1}" for i in range(traj.outputs.shape[1])]
    if traj.inputs is not None:
        cols.append(traj.inputs)
        header += [f"u{i + 1}" for i in range(traj.inputs.shape[1])]
    data = np.hstack(cols)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_trajectory_csv(path) -> tuple[Array, dict[str, Array]]:
    """Load a trajectory CSV back into (times, {column group: array})."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    groups: dict[str, list[int]] = {}
    for i, name in enumerate(header):
        if name == "t":
            continue
        groups.setdefault(name[0], []).append(i)
    t = data[:, header.index("t")]
    return t, {k: data[:, idx] for k, idx in groups.items()}
