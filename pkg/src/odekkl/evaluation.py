"""Observer evaluation: error metrics, noise scenario grids, robustness
sweeps against the closed-form linear case, and error-bound reporting.

Conventions shared by everything here: observers start from zero state
(latent z or estimate x_hat), plants are simulated on the same RK4 grid the
observers run on, and noise draws are held constant within each solver step.
Paired comparisons reuse one noise realization per scenario cell across all
observers so that differences reflect the observers, not the draws.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .integrate import DivergenceError, TimeGrid, Trajectory, solve_ivp_batch, write_trajectory_csv
from .net import lipschitz_upper_bound
from .observer import KklObserver, LuenbergerObserver, d_eigenvalues
from .systems import NoiseSpec, SystemSpec, sample_noise
from .train import Dataset, _apply_net, _kkl_rollout, _luen_rollout

Array = np.ndarray


def rmse(x_traj: Trajectory, xhat_traj: Trajectory, warmup: float = 0.0) -> float:
    """Root mean squared per-component error over grid points with t >= t0 + warmup.

    warmup = 0 scores the whole horizon, transient included.
    """
    if x_traj.grid != xhat_traj.grid:
        raise ValueError("trajectories live on different grids")
    t = x_traj.grid.times()
    keep = t >= x_traj.grid.t0 + warmup - 1e-12
    if not np.any(keep):
        raise ValueError("warmup leaves no samples to score")
    diff = x_traj.states[keep] - xhat_traj.states[keep]
    return float(np.sqrt(np.mean(diff**2)))


def _convergence_time_from_errors(t: Array, e: Array, threshold: float) -> float:
    """First grid time after which the error norm stays below threshold * e[0].

    Returns +inf when the error never settles (including when it dips under
    the threshold but comes back out).
    """
    e0 = e[0]
    if e0 == 0.0:
        return float(t[0])
    thr = threshold * e0
    suffix_max = np.maximum.accumulate(e[::-1])[::-1]
    idx = np.nonzero(suffix_max < thr)[0]
    if idx.size == 0:
        return float("inf")
    return float(t[idx[0]])


def convergence_time(x_traj: Trajectory, xhat_traj: Trajectory, threshold: float = 0.05) -> float:
    """Settling time of |x - x_hat| to 5% (by default) of its initial value."""
    if x_traj.grid != xhat_traj.grid:
        raise ValueError("trajectories live on different grids")
    e = np.linalg.norm(x_traj.states - xhat_traj.states, axis=-1)
    return _convergence_time_from_errors(x_traj.grid.times(), e, threshold)


# ---------------------------------------------------------------------------
# scenario matrix


@dataclass(frozen=True)
class ScenarioResult:
    observer_id: str
    scenario: str
    rmse: float
    convergence_time: float
    trajectory_refs: tuple[str, ...] = ()


def plant_with_noise(
    sys: SystemSpec, x0s: Array, grid: TimeGrid, noise: NoiseSpec, rng: np.random.Generator
) -> tuple[Array, Array]:
    """Simulate the plant for a batch of initial states under one noise spec.

    Measurement noise corrupts recorded outputs; process noise perturbs the
    drift with a per-step draw held across the RK4 stages.  Returns
    (X (B, n+1, n_x), Y_measured (B, n+1, n_y)).
    """
    B = x0s.shape[0]
    n = grid.n_steps
    if noise.is_active and noise.target == "process":
        X = np.empty((B, n + 1, sys.n_x))
        x = x0s.copy()
        X[:, 0] = x
        h = grid.h
        for k in range(n):
            w_k = sample_noise(noise, sys.n_x, rng, n=B)
            t = grid.t0 + k * grid.h

            def f(tau, xs):
                return sys.drift(tau, xs) + w_k

            k1 = f(t, x)
            k2 = f(t + h / 2, x + (h / 2) * k1)
            k3 = f(t + h / 2, x + (h / 2) * k2)
            k4 = f(t + h, x + h * k3)
            x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(k + 1, t + h)
            X[:, k + 1] = x
        Y = sys.output(X)
    else:
        X = solve_ivp_batch(sys.drift, x0s, grid)
        Y = sys.output(X)
        if noise.is_active:
            V = sample_noise(noise, sys.n_y, rng, n=B * (n + 1)).reshape(B, n + 1, sys.n_y)
            Y = Y + V
    return X, Y


def _estimate_batch(obs, Y: Array, grid: TimeGrid) -> Array:
    """Run one observer over a batch of measurement records; returns x_hat."""
    if isinstance(obs, KklObserver):
        Z = _kkl_rollout(d_eigenvalues(obs), Y.sum(axis=-1), grid)
        return _apply_net(obs.tstar, Z)
    if isinstance(obs, LuenbergerObserver):
        return _luen_rollout(obs, Y, np.zeros((Y.shape[0], obs.n_x)), grid)
    raise TypeError(f"not an observer: {type(obs)!r}")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text.strip()) or "unnamed"


def scenario_matrix(
    observers: list[tuple[str, object]],
    sys: SystemSpec,
    x0s: Array,
    scenarios: list[tuple[str, NoiseSpec]],
    grid: TimeGrid,
    rng: np.random.Generator,
    warmup: float = 0.0,
    threshold: float = 0.05,
    out_dir: str | None = None,
) -> list[ScenarioResult]:
    """Evaluate every observer under every noise scenario.

    One noise realization is drawn per scenario (covering all test initial
    conditions) and shared across observers.  RMSE pools all initial
    conditions, grid points past the warmup, and state components; the
    reported convergence time is the median over initial conditions.
    A diverged cell is reported as rmse = nan rather than aborting the grid.
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    t = grid.times()
    keep = t >= grid.t0 + warmup - 1e-12
    results: list[ScenarioResult] = []
    children = rng.spawn(len(scenarios))
    plants = []
    for (label, noise), child in zip(scenarios, children):
        plants.append(plant_with_noise(sys, x0s, grid, noise, child))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for obs_id, obs in observers:
        for (label, noise), (X, Y) in zip(scenarios, plants):
            try:
                Xh = _estimate_batch(obs, Y, grid)
            except (DivergenceError, FloatingPointError):
                results.append(ScenarioResult(obs_id, label, float("nan"), float("inf")))
                continue
            diff = Xh - X
            cell_rmse = float(np.sqrt(np.mean(diff[:, keep] ** 2)))
            errs = np.linalg.norm(diff, axis=-1)
            times = [
                _convergence_time_from_errors(t, errs[i], threshold) for i in range(x0s.shape[0])
            ]
            refs: tuple[str, ...] = ()
            if out_dir is not None:
                path = os.path.join(out_dir, f"{_slug(obs_id)}__{_slug(label)}.csv")
                write_trajectory_csv(Trajectory(grid=grid, states=Xh[0]), path)
                refs = (path,)
            results.append(
                ScenarioResult(obs_id, label, cell_rmse, float(np.median(times)), refs)
            )
    return results


def write_scenario_csv(results: list[ScenarioResult], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("observer,scenario,rmse,convergence_time\n")
        for r in results:
            fh.write(f"{r.observer_id},{r.scenario},{r.rmse:.17g},{r.convergence_time:.17g}\n")


# ---------------------------------------------------------------------------
# linear reference: Sylvester solution and robustness sweep


def sylvester_transform(A: Array, C: Array, D: Array, F: Array) -> Array:
    """Solve T A - D T = F C for T via the vectorized linear system.

    This is the exact contraction map for a linear plant; it exists and is
    unique when the spectra of A and D are disjoint.  Raises LinAlgError
    when the problem is singular or the residual is not tiny.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    F = np.asarray(F, dtype=float)
    n = A.shape[0]
    dz = D.shape[0]
    rhs = F @ C
    M = np.kron(np.eye(dz), A.T) - np.kron(D, np.eye(n))
    T = np.linalg.solve(M, rhs.reshape(-1)).reshape(dz, n)
    resid = np.linalg.norm(T @ A - D @ T - rhs)
    if not np.isfinite(resid) or resid > 1e-10 * max(1.0, np.linalg.norm(rhs)):
        raise np.linalg.LinAlgError(f"sylvester solve residual {resid:g} too large")
    return T


@dataclass(frozen=True)
class SweepPoint:
    k: float
    convergence_time: float
    steady_state_error: float


def robustness_sweep(
    A: Array,
    C: Array,
    lam_base: Array,
    k_values,
    noise: NoiseSpec,
    grid: TimeGrid,
    rng: np.random.Generator,
    x0: Array | None = None,
    threshold: float = 0.05,
    steady_frac: float = 0.2,
    return_detail: bool = False,
):
    """Scale the latent eigenvalues by k and measure the speed/noise trade.

    The plant is linear, so the contraction map T_k is the Sylvester
    solution and the estimate is its pseudoinverse applied to the latent
    state.  One noise realization is drawn up front and shared by every k,
    making the sweep a paired comparison.  Faster latent dynamics (larger
    k) settle sooner but amplify noise in steady state.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    lam_base = np.asarray(lam_base, dtype=float)
    if np.any(lam_base >= 0):
        raise ValueError("base eigenvalues must be negative")
    n = A.shape[0]
    n_y = C.shape[0]
    dz = lam_base.shape[0]
    F = np.ones((dz, n_y))
    if x0 is None:
        x0 = np.ones(n)
    x0 = np.asarray(x0, dtype=float)

    sys = _linear_system(A, C)
    X, Y = plant_with_noise(sys, x0[None], grid, noise, rng)
    t = grid.times()
    n1 = t.shape[0]
    tail = max(1, int(np.ceil(steady_frac * n1)))

    points: list[SweepPoint] = []
    details: list[dict] = []
    for k in k_values:
        lam_k = float(k) * lam_base
        T_k = sylvester_transform(A, C, np.diag(lam_k), F)
        Z = _kkl_rollout(lam_k, Y.sum(axis=-1), grid)[0]
        x_tilde = Z @ np.linalg.pinv(T_k).T
        e = np.linalg.norm(X[0] - x_tilde, axis=-1)
        ct = _convergence_time_from_errors(t, e, threshold)
        sse = float(np.mean(e[-tail:]))
        points.append(SweepPoint(float(k), ct, sse))
        if return_detail:
            details.append(
                {"k": float(k), "T": T_k, "Z": Z, "x_tilde": x_tilde, "errors": e}
            )
    if return_detail:
        detail = {
            "t": t,
            "X": X[0],
            "Y": Y[0],
            "F": F,
            "lam_base": lam_base,
            "runs": details,
        }
        return points, detail
    return points


def _linear_system(A: Array, C: Array) -> SystemSpec:
    from .systems import make_linear

    return make_linear(A, C)


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("k,convergence_time,steady_state_error\n")
        for p in points:
            fh.write(f"{p.k:.17g},{p.convergence_time:.17g},{p.steady_state_error:.17g}\n")


# ---------------------------------------------------------------------------
# generalization map and error-bound report


def generalization_map(
    obs: KklObserver, sys: SystemSpec, ics: Array, grid: TimeGrid, warmup: float = 0.0
) -> Array:
    """Per-initial-condition RMSE over a grid of starting states.

    Returns an array of rows (x1_0, ..., xn_0, rmse); divergent cells get
    rmse = nan.  Measurements are noiseless, so the map shows how the
    learned inverse degrades away from the training domain.
    """
    ics = np.atleast_2d(np.asarray(ics, dtype=float))
    M = ics.shape[0]
    t = grid.times()
    keep = t >= grid.t0 + warmup - 1e-12
    out = np.full((M, ics.shape[1] + 1), np.nan)
    out[:, :-1] = ics

    def score(batch_ics):
        X = solve_ivp_batch(sys.drift, batch_ics, grid)
        Y = sys.output(X)
        Xh = _estimate_batch(obs, Y, grid)
        diff = (Xh - X)[:, keep]
        return np.sqrt(np.mean(diff**2, axis=(1, 2)))

    try:
        out[:, -1] = score(ics)
    except (DivergenceError, FloatingPointError):
        for i in range(M):
            try:
                out[i, -1] = score(ics[i : i + 1])[0]
            except (DivergenceError, FloatingPointError):
                out[i, -1] = np.nan
    return out


def write_genmap_csv(records: Array, path) -> None:
    records = np.atleast_2d(records)
    n_ic = records.shape[1] - 1
    header = ",".join(f"x{i + 1}_0" for i in range(n_ic)) + ",rmse"
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in records:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


@dataclass(frozen=True)
class ErrorBoundReport:
    """Empirical check of |x_hat - x| <= l * |z - tfwd(x)| + eps_bar."""

    lipschitz_l: float
    eps_bar: float
    t: Array
    observed: Array  # (n_traj, n_points) error norms
    bound: Array  # (n_traj, n_points) bound values
    fraction_satisfied: float


def error_bound_report(obs: KklObserver, ds: Dataset) -> ErrorBoundReport:
    """Evaluate the Lipschitz error bound of the learned inverse on a dataset.

    l is an upper bound on the Lipschitz constant of tstar (product of layer
    spectral norms); eps_bar is the worst observed round-trip error
    |tstar(tfwd(x)) - x| over the dataset, which plays the role of the
    inverse-map defect at perfect latent input.
    """
    if obs.t_fwd is None:
        raise ValueError("the error bound needs an observer with a forward map")
    lip = lipschitz_upper_bound(obs.tstar.spec, obs.tstar.params)
    TX = _apply_net(obs.t_fwd, ds.x)
    roundtrip = _apply_net(obs.tstar, TX)
    eps_bar = float(np.max(np.linalg.norm(roundtrip - ds.x, axis=-1)))

    Z = _kkl_rollout(d_eigenvalues(obs), ds.y.sum(axis=-1), ds.grid)
    Xh = _apply_net(obs.tstar, Z)
    observed = np.linalg.norm(Xh - ds.x, axis=-1)
    bound = lip * np.linalg.norm(Z - TX, axis=-1) + eps_bar
    frac = float(np.mean(observed <= bound + 1e-12))
    return ErrorBoundReport(
        lipschitz_l=lip,
        eps_bar=eps_bar,
        t=ds.grid.times(),
        observed=observed,
        bound=bound,
        fraction_satisfied=frac,
    )
