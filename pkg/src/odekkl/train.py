"""Dataset generation, losses, gradients, and the training loop.

Gradients come in two flavors.  ``grad_backprop`` differentiates the
actual discrete computation: reverse-mode through every RK4 stage of the
latent rollout and through every network evaluation, so it is exact for
the loss as computed (finite differences agree to roundoff).  ``grad_adjoint``
integrates the continuous adjoint ODE backwards on the same grid, reusing
the stored forward trajectory with midpoint interpolation at the half
steps; it matches backprop up to discretization error, which is the
standard trade: less memory traffic, approximate gradient.

Losses are integrals over the horizon, discretized with trapezoid weights
on the solver grid, and averaged over the trajectories in the batch.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .integrate import TimeGrid, Trajectory, solve_ivp_batch
from .net import MlpNet, backward, forward, jvp, jvp_backward
from .observer import KklObserver, LuenbergerObserver, d_eigenvalues, save_observer
from .systems import NoiseSpec, SystemSpec, sample_initial_states, sample_noise

Array = np.ndarray

_CHUNK = 25000  # grid points per network pass; bounds cache memory


class TrainingDivergence(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class Dataset:
    """Simulated trajectories with (possibly corrupted) recorded outputs.

    ``x`` has shape (n_traj, n_points, n_x) and stays clean; ``y`` has shape
    (n_traj, n_points, n_y) and already contains whatever noise the dataset
    was generated with.  Corruption happens once, at creation, so repeated
    passes over the data see identical measurements.
    """

    grid: TimeGrid
    x: Array
    y: Array
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        n_rows = self.grid.n_steps + 1
        if x.ndim != 3 or x.shape[1] != n_rows:
            raise ValueError(f"x must be (n_traj, {n_rows}, n_x), got {x.shape}")
        if y.shape[:2] != x.shape[:2]:
            raise ValueError("x and y must cover the same trajectories and times")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_traj(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(grid=self.grid, x=self.x[idx], y=self.y[idx], noise=self.noise)

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(grid=self.grid, states=self.x[i], outputs=self.y[i])


def generate_dataset(
    sys: SystemSpec,
    n_traj: int,
    grid: TimeGrid,
    rng: np.random.Generator,
    train_noise: NoiseSpec | None = None,
) -> Dataset:
    """Sample initial states from the domain, integrate, record outputs.

    Measurement noise (if any) corrupts the recorded y once; the state
    trajectories are exact.  Process noise is not applied here: training
    data comes from the nominal model.
    """
    train_noise = train_noise or NoiseSpec()
    x0 = sample_initial_states(sys, n_traj, rng)
    X = solve_ivp_batch(sys.drift, x0, grid)
    Y = sys.output(X)
    if train_noise.is_active:
        if train_noise.target != "measurement":
            raise ValueError("dataset corruption only supports measurement noise")
        Y = Y + sample_noise(train_noise, Y.shape[-1], rng, n=X.shape[0] * X.shape[1]).reshape(Y.shape)
    return Dataset(grid=grid, x=X, y=Y, noise=train_noise)


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components: total = data + gamma * reg + pde_weight * pde + fwd."""

    data: float
    reg: float = 0.0
    pde: float = 0.0
    fwd: float = 0.0
    total: float = 0.0

    @staticmethod
    def combine(data, reg=0.0, pde=0.0, fwd=0.0, gamma=0.0, pde_weight=0.0) -> "LossBreakdown":
        return LossBreakdown(
            data=float(data),
            reg=float(reg),
            pde=float(pde),
            fwd=float(fwd),
            total=float(data + gamma * reg + pde_weight * pde + fwd),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 0  # 0 = full batch; otherwise trajectories per step
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # multiplicative factor applied after each epoch
    optimizer: str = "adam"  # "adam" | "gd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 0.0  # weight of the eigenvalue magnitude penalty
    pde_weight: float = 0.0
    weight_decay: float = 0.0  # plain L2 shrink on parameters, off by default
    gradient_mode: str = "backprop"  # "backprop" | "adjoint"
    loss_mode: str = "lagrange"  # "lagrange" | "nonauto"
    learn_d: bool = True
    train_noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.gradient_mode not in ("backprop", "adjoint"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.loss_mode not in ("lagrange", "nonauto"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.epochs < 0 or self.learning_rate <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError("bad optimizer hyperparameters")
        if self.gamma < 0 or self.pde_weight < 0 or self.weight_decay < 0:
            raise ValueError("penalty weights must be nonnegative")


def quad_weights(grid: TimeGrid) -> Array:
    """Trapezoid weights on the solver grid."""
    w = np.full(grid.n_steps + 1, grid.h)
    w[0] = w[-1] = grid.h / 2.0
    return w


def loss_lagrange(x_traj: Trajectory, xhat_traj: Trajectory) -> float:
    """Integral of the squared estimation error over the horizon."""
    if x_traj.grid != xhat_traj.grid:
        raise ValueError("trajectories live on different grids")
    w = quad_weights(x_traj.grid)
    sq = np.sum((x_traj.states - xhat_traj.states) ** 2, axis=-1)
    return float(w @ sq)


def loss_regularized(data_loss: float, obs: KklObserver, gamma: float, grid: TimeGrid) -> LossBreakdown:
    """Data loss plus the horizon-scaled eigenvalue magnitude penalty."""
    lam = d_eigenvalues(obs)
    reg = (grid.tf - grid.t0) * float(np.sum(lam**2))
    return LossBreakdown.combine(data_loss, reg=reg, gamma=gamma)


def pde_penalty(obs: KklObserver, sys: SystemSpec, x: Array, y: Array) -> float:
    """Residual norm of the contraction-map PDE at one state/output pair.

    The forward map should push the plant flow onto the latent flow:
    J_tfwd(x) f(x) = D tfwd(x) + F y.  Returns the Euclidean norm of the
    mismatch.
    """
    if obs.t_fwd is None:
        raise ValueError("pde penalty needs an observer with a forward map")
    x = np.asarray(x, dtype=float)
    fx = sys.drift(0.0, x)
    val, tang, _ = jvp(obs.t_fwd.spec, obs.t_fwd.params, x, fx)
    lam = d_eigenvalues(obs)
    r = tang - (lam * val + obs.F @ np.asarray(y, dtype=float))
    return float(np.linalg.norm(r))


def loss_nonauto(obs: KklObserver, x_traj: Trajectory, z_traj: Trajectory) -> LossBreakdown:
    """Consistency losses for the jointly learned forward/inverse maps.

    fwd penalizes the latent rollout disagreeing with tfwd(x); data
    penalizes the round trip tstar(tfwd(x)) missing x.
    """
    if obs.t_fwd is None:
        raise ValueError("this loss needs an observer with a forward map")
    if x_traj.grid != z_traj.grid:
        raise ValueError("trajectories live on different grids")
    w = quad_weights(x_traj.grid)
    tx = obs.t_fwd(x_traj.states)
    fwd = float(w @ np.sum((z_traj.states - tx) ** 2, axis=-1))
    roundtrip = obs.tstar(tx)
    data = float(w @ np.sum((roundtrip - x_traj.states) ** 2, axis=-1))
    return LossBreakdown.combine(data, fwd=fwd)


# ---------------------------------------------------------------------------
# parameter packing


def pack_params(obs) -> Array:
    """Flatten everything the optimizer may touch into one vector.

    KKL layout: rho, then tstar parameters, then (if present) t_fwd
    parameters.  Luenberger layout: ghat parameters.
    """
    if isinstance(obs, KklObserver):
        parts = [obs.rho, obs.tstar.params]
        if obs.t_fwd is not None:
            parts.append(obs.t_fwd.params)
        return np.concatenate(parts)
    if isinstance(obs, LuenbergerObserver):
        return obs.ghat.params.copy()
    raise TypeError(f"not an observer: {type(obs)!r}")


def with_params(obs, vec: Array):
    """Rebuild an observer from a packed parameter vector."""
    vec = np.asarray(vec, dtype=float)
    if isinstance(obs, KklObserver):
        d = obs.d_z
        n1 = obs.tstar.spec.n_params
        rho = vec[:d]
        tstar = MlpNet(obs.tstar.spec, vec[d : d + n1].copy())
        t_fwd = obs.t_fwd
        if t_fwd is not None:
            t_fwd = MlpNet(t_fwd.spec, vec[d + n1 : d + n1 + t_fwd.spec.n_params].copy())
        return KklObserver(n_x=obs.n_x, n_y=obs.n_y, rho=rho.copy(), tstar=tstar, t_fwd=t_fwd)
    if isinstance(obs, LuenbergerObserver):
        return replace(obs, ghat=MlpNet(obs.ghat.spec, vec.copy()))
    raise TypeError(f"not an observer: {type(obs)!r}")


def _frozen_slice_mask(obs, config: TrainConfig) -> Array | None:
    """Boolean mask of parameters to keep fixed (None when all are free)."""
    if isinstance(obs, KklObserver) and not config.learn_d:
        mask = np.zeros(pack_params(obs).shape[0], dtype=bool)
        mask[: obs.d_z] = True
        return mask
    return None


# ---------------------------------------------------------------------------
# latent rollout and its exact reverse pass (KKL)


def _kkl_rollout(lam: Array, ysum: Array, grid: TimeGrid) -> Array:
    """Batched RK4 for dz/dt = lam*z + c(t), c given per grid point.

    ysum is (B, n_points) holding F y collapsed to its common row value
    (all-ones F makes every component identical).  Returns (B, n_points, d_z).
    """
    B, n1 = ysum.shape
    d = lam.shape[0]
    h = grid.h
    Z = np.empty((B, n1, d))
    z = np.zeros((B, d))
    Z[:, 0] = z
    for k in range(n1 - 1):
        c0 = ysum[:, k : k + 1]
        c1 = ysum[:, k + 1 : k + 2]
        cm = 0.5 * (c0 + c1)
        k1 = lam * z + c0
        b = z + (h / 2.0) * k1
        k2 = lam * b + cm
        cc = z + (h / 2.0) * k2
        k3 = lam * cc + cm
        dd = z + h * k3
        k4 = lam * dd + c1
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Z[:, k + 1] = z
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("latent rollout produced non-finite values")
    return Z


def _kkl_rollout_backward(lam: Array, ysum: Array, Z: Array, gZ: Array, grid: TimeGrid) -> Array:
    """Reverse-mode through the rollout; returns d(loss)/d(lam).

    gZ carries the loss gradient at every stored grid point.  Stages are
    recomputed from the stored states, then each RK4 update is unwound
    exactly.
    """
    B, n1, d = Z.shape
    h = grid.h
    glam = np.zeros(d)
    w = gZ[:, n1 - 1].copy()
    for k in range(n1 - 2, -1, -1):
        z = Z[:, k]
        c0 = ysum[:, k : k + 1]
        c1 = ysum[:, k + 1 : k + 2]
        cm = 0.5 * (c0 + c1)
        k1 = lam * z + c0
        b = z + (h / 2.0) * k1
        k2 = lam * b + cm
        cc = z + (h / 2.0) * k2
        k3 = lam * cc + cm
        dd = z + h * k3

        v = w
        k4_bar = (h / 6.0) * v
        d_bar = lam * k4_bar
        glam += np.sum(k4_bar * dd, axis=0)
        k3_bar = (h / 3.0) * v + h * d_bar
        c_bar = lam * k3_bar
        glam += np.sum(k3_bar * cc, axis=0)
        k2_bar = (h / 3.0) * v + (h / 2.0) * c_bar
        b_bar = lam * k2_bar
        glam += np.sum(k2_bar * b, axis=0)
        k1_bar = (h / 6.0) * v + (h / 2.0) * b_bar
        glam += np.sum(k1_bar * z, axis=0)
        w = v + b_bar + c_bar + d_bar + lam * k1_bar
        w = w + gZ[:, k]
    return glam


def _chunks(n: int, size: int = _CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _kkl_grad_backprop(obs: KklObserver, ds: Dataset, config: TrainConfig, sys: SystemSpec | None):
    lam = d_eigenvalues(obs)
    grid = ds.grid
    B = ds.n_traj
    n1 = grid.n_steps + 1
    ysum = ds.y.sum(axis=-1)
    Z = _kkl_rollout(lam, ysum, grid)

    w = quad_weights(grid)
    wflat = np.broadcast_to(w, (B, n1)).reshape(-1)
    ZF = Z.reshape(-1, obs.d_z)
    XF = ds.x.reshape(-1, obs.n_x)
    N = ZF.shape[0]

    tstar = obs.tstar
    has_fwd = obs.t_fwd is not None
    g_tstar = np.zeros(tstar.spec.n_params)
    g_tfwd = np.zeros(obs.t_fwd.spec.n_params) if has_fwd else None
    gZflat = np.empty_like(ZF)
    grad_rho = np.zeros(obs.d_z)
    data = 0.0
    fwd = 0.0
    pde = 0.0

    if config.loss_mode == "lagrange":
        for c in _chunks(N):
            xh, cache = forward(tstar.spec, tstar.params, ZF[c])
            r = xh - XF[c]
            wc = wflat[c]
            data += float(wc @ np.sum(r * r, axis=-1))
            go = (2.0 / B) * wc[:, None] * r
            gp, gz = backward(tstar.spec, tstar.params, cache, go)
            g_tstar += gp
            gZflat[c] = gz
        data /= B
    elif config.loss_mode == "nonauto":
        if not has_fwd:
            raise ValueError("nonauto loss needs an observer with a forward map")
        tfwd = obs.t_fwd
        for c in _chunks(N):
            tx, cache1 = forward(tfwd.spec, tfwd.params, XF[c])
            rf = ZF[c] - tx
            wc = wflat[c]
            fwd += float(wc @ np.sum(rf * rf, axis=-1))
            xh, cache2 = forward(tstar.spec, tstar.params, tx)
            rd = xh - XF[c]
            data += float(wc @ np.sum(rd * rd, axis=-1))
            go2 = (2.0 / B) * wc[:, None] * rd
            gp2, g_tx = backward(tstar.spec, tstar.params, cache2, go2)
            g_tstar += gp2
            go1 = g_tx - (2.0 / B) * wc[:, None] * rf
            gp1, _ = backward(tfwd.spec, tfwd.params, cache1, go1)
            g_tfwd += gp1
            gZflat[c] = (2.0 / B) * wc[:, None] * rf
        data /= B
        fwd /= B

    if config.pde_weight > 0.0:
        if not has_fwd:
            raise ValueError("pde penalty needs an observer with a forward map")
        if sys is None:
            raise ValueError("pde penalty needs the system (for its drift)")
        tfwd = obs.t_fwd
        YF = ds.y.reshape(-1, obs.n_y)
        fsum = YF.sum(axis=-1)
        for c in _chunks(N):
            x = XF[c]
            fx = sys.drift(0.0, x)
            val, tang, cache = jvp(tfwd.spec, tfwd.params, x, fx)
            r = tang - (lam * val + fsum[c, None])
            norms = np.linalg.norm(r, axis=-1)
            wc = wflat[c]
            pde += float(wc @ norms)
            safe = np.where(norms > 0.0, norms, 1.0)
            r_bar = (config.pde_weight / B) * (wc / safe)[:, None] * r
            grad_rho += -np.sum(r_bar * val, axis=0) * lam
            gp, _, _ = jvp_backward(tfwd.spec, tfwd.params, cache, -lam * r_bar, r_bar)
            g_tfwd += gp
        pde /= B

    glam = _kkl_rollout_backward(lam, ysum, Z, gZflat.reshape(B, n1, obs.d_z), grid)
    grad_rho += glam * lam

    span = grid.tf - grid.t0
    reg = span * float(np.sum(lam**2))
    grad_rho += config.gamma * 2.0 * span * lam**2

    breakdown = LossBreakdown.combine(
        data, reg=reg, pde=pde, fwd=fwd, gamma=config.gamma, pde_weight=config.pde_weight
    )
    parts = [grad_rho, g_tstar] + ([g_tfwd] if has_fwd else [])
    return breakdown, np.concatenate(parts)


# ---------------------------------------------------------------------------
# Luenberger rollout and reverse pass


def _luen_stage_drift(obs: LuenbergerObserver, x: Array, y: Array):
    val, cache = forward(obs.ghat.spec, obs.ghat.params, x)
    innov = y - x @ obs.C.T
    return x @ obs.A.T + val + innov @ obs.G.T, cache


def _luen_rollout(obs: LuenbergerObserver, Y: Array, x0: Array, grid: TimeGrid) -> Array:
    B, n1, _ = Y.shape
    h = grid.h
    X = np.empty((B, n1, obs.n_x))
    x = np.asarray(x0, dtype=float)
    X[:, 0] = x
    for k in range(n1 - 1):
        y0, y1 = Y[:, k], Y[:, k + 1]
        ym = 0.5 * (y0 + y1)
        k1, _ = _luen_stage_drift(obs, x, y0)
        b = x + (h / 2.0) * k1
        k2, _ = _luen_stage_drift(obs, b, ym)
        cc = x + (h / 2.0) * k2
        k3, _ = _luen_stage_drift(obs, cc, ym)
        dd = x + h * k3
        k4, _ = _luen_stage_drift(obs, dd, y1)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X[:, k + 1] = x
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("observer rollout produced non-finite values")
    return X


def _luen_grad_backprop(obs: LuenbergerObserver, ds: Dataset, config: TrainConfig):
    if config.loss_mode != "lagrange":
        raise ValueError("the Luenberger observer trains on the lagrange loss")
    grid = ds.grid
    B = ds.n_traj
    n1 = grid.n_steps + 1
    h = grid.h
    Y = ds.y
    x0 = np.zeros((B, obs.n_x))
    Xh = _luen_rollout(obs, Y, x0, grid)

    w = quad_weights(grid)
    diff = Xh - ds.x
    data = float(np.sum(w[None, :] * np.sum(diff * diff, axis=-1))) / B
    gX = (2.0 / B) * w[None, :, None] * diff

    AT = obs.A.T
    GCT = (obs.G @ obs.C).T
    spec, params = obs.ghat.spec, obs.ghat.params
    gtheta = np.zeros(spec.n_params)

    def stage_vjp(x_stage, q):
        # one recomputed forward for the cache, then reverse through
        # A x + ghat(x) + G(y - C x); y is data, no gradient flows there
        _, cache = forward(spec, params, x_stage)
        gp, gx = backward(spec, params, cache, q)
        return gp, q @ AT.T + gx - q @ GCT.T

    wbar = gX[:, n1 - 1].copy()
    for k in range(n1 - 2, -1, -1):
        x = Xh[:, k]
        y0, y1 = Y[:, k], Y[:, k + 1]
        ym = 0.5 * (y0 + y1)
        k1, _ = _luen_stage_drift(obs, x, y0)
        b = x + (h / 2.0) * k1
        k2, _ = _luen_stage_drift(obs, b, ym)
        cc = x + (h / 2.0) * k2
        k3, _ = _luen_stage_drift(obs, cc, ym)
        dd = x + h * k3

        v = wbar
        k4_bar = (h / 6.0) * v
        gp, d_bar = stage_vjp(dd, k4_bar)
        gtheta += gp
        k3_bar = (h / 3.0) * v + h * d_bar
        gp, c_bar = stage_vjp(cc, k3_bar)
        gtheta += gp
        k2_bar = (h / 3.0) * v + (h / 2.0) * c_bar
        gp, b_bar = stage_vjp(b, k2_bar)
        gtheta += gp
        k1_bar = (h / 6.0) * v + (h / 2.0) * b_bar
        gp, a_bar = stage_vjp(x, k1_bar)
        gtheta += gp
        wbar = v + b_bar + c_bar + d_bar + a_bar
        wbar = wbar + gX[:, k]

    breakdown = LossBreakdown.combine(data)
    return breakdown, gtheta


def grad_backprop(obs, ds: Dataset, config: TrainConfig, sys: SystemSpec | None = None):
    """Loss and exact gradient of the discrete computation.

    Returns (LossBreakdown, gradient) with the gradient laid out like
    ``pack_params``.
    """
    if isinstance(obs, KklObserver):
        return _kkl_grad_backprop(obs, ds, config, sys)
    if isinstance(obs, LuenbergerObserver):
        return _luen_grad_backprop(obs, ds, config)
    raise TypeError(f"not an observer: {type(obs)!r}")


# ---------------------------------------------------------------------------
# continuous adjoint


def _interp_mid(A: Array, k: int) -> Array:
    return 0.5 * (A[:, k] + A[:, k + 1])


def _apply_net(net: MlpNet, X: Array) -> Array:
    """Chunked evaluation over flattened leading axes (bounded memory)."""
    lead = X.shape[:-1]
    X2 = X.reshape(-1, X.shape[-1])
    out = np.empty((X2.shape[0], net.spec.n_out))
    for c in _chunks(X2.shape[0]):
        out[c] = forward(net.spec, net.params, X2[c])[0]
    return out.reshape(lead + (net.spec.n_out,))


def grad_adjoint(obs, ds: Dataset, config: TrainConfig, sys: SystemSpec | None = None):
    """Loss and gradient via the adjoint boundary-value problem.

    The costate p satisfies dp/dt = -p dF/dz - dL/dz with p(tf) = 0, and
    the accumulator mu follows mu' = -p dF/dtheta - dL/dtheta with
    mu(tf) = 0; its value at t0 is the gradient.  Both are integrated
    backwards with RK4 on the stored grid, with midpoint interpolation of
    the stored states at the half steps, so the result matches backprop
    only up to discretization error.
    """
    grid = ds.grid
    B = ds.n_traj
    n1 = grid.n_steps + 1
    h = grid.h
    span = grid.tf - grid.t0
    w = quad_weights(grid)

    if isinstance(obs, KklObserver):
        lam = d_eigenvalues(obs)
        ysum = ds.y.sum(axis=-1)
        Z = _kkl_rollout(lam, ysum, grid)
        tstar = obs.tstar
        has_fwd = obs.t_fwd is not None
        nonauto = config.loss_mode == "nonauto"
        if nonauto and not has_fwd:
            raise ValueError("nonauto loss needs an observer with a forward map")
        use_pde = config.pde_weight > 0.0
        if use_pde and not has_fwd:
            raise ValueError("pde penalty needs an observer with a forward map")
        if use_pde and sys is None:
            raise ValueError("pde penalty needs the system (for its drift)")

        # loss values on the grid (gradients come from the adjoint pass)
        fwd = 0.0
        pde = 0.0
        if nonauto:
            tx = _apply_net(obs.t_fwd, ds.x)
            rf = Z - tx
            fwd = float(np.sum(w[None, :] * np.sum(rf * rf, axis=-1))) / B
            rd = _apply_net(tstar, tx) - ds.x
        else:
            rd = _apply_net(tstar, Z) - ds.x
        data = float(np.sum(w[None, :] * np.sum(rd * rd, axis=-1))) / B
        reg = span * float(np.sum(lam**2))
        if use_pde:
            XF = ds.x.reshape(-1, obs.n_x)
            fsum = ds.y.sum(axis=-1).reshape(-1)
            wflat = np.broadcast_to(w, (B, n1)).reshape(-1)
            for c in _chunks(XF.shape[0]):
                x = XF[c]
                val, tang, _ = jvp(obs.t_fwd.spec, obs.t_fwd.params, x, sys.drift(0.0, x))
                r = tang - (lam * val + fsum[c, None])
                pde += float(wflat[c] @ np.linalg.norm(r, axis=-1))
            pde /= B

        n_t = tstar.spec.n_params
        n_f = obs.t_fwd.spec.n_params if has_fwd else 0

        def loss_partials(zv, xv, yv):
            """dL/dz and the dL/dtheta pieces at one time instant."""
            g_rho = config.gamma * 2.0 * lam**2  # the eigenvalue penalty, per unit time
            g_ts = np.zeros(n_t)
            g_tf = np.zeros(n_f)
            if nonauto:
                txv, cache1 = forward(obs.t_fwd.spec, obs.t_fwd.params, xv)
                rfv = zv - txv
                dLdz = (2.0 / B) * rfv
                xhv, cache2 = forward(tstar.spec, tstar.params, txv)
                gp2, g_tx = backward(tstar.spec, tstar.params, cache2, (2.0 / B) * (xhv - xv))
                g_ts += gp2
                gp1, _ = backward(
                    obs.t_fwd.spec, obs.t_fwd.params, cache1, g_tx - (2.0 / B) * rfv
                )
                g_tf += gp1
            else:
                xhv, cache = forward(tstar.spec, tstar.params, zv)
                gp, gz = backward(tstar.spec, tstar.params, cache, (2.0 / B) * (xhv - xv))
                g_ts += gp
                dLdz = gz
            if use_pde:
                fx = sys.drift(0.0, xv)
                val, tang, cache = jvp(obs.t_fwd.spec, obs.t_fwd.params, xv, fx)
                r = tang - (lam * val + yv[:, None])
                norms = np.linalg.norm(r, axis=-1)
                safe = np.where(norms > 0.0, norms, 1.0)
                r_bar = (config.pde_weight / B) * (r / safe[:, None])
                g_rho = g_rho - np.sum(r_bar * val, axis=0) * lam
                gp, _, _ = jvp_backward(obs.t_fwd.spec, obs.t_fwd.params, cache, -lam * r_bar, r_bar)
                g_tf = g_tf + gp
            return dLdz, g_rho, g_ts, g_tf

        def rhs(p, zv, xv, yv):
            dLdz, g_rho, g_ts, g_tf = loss_partials(zv, xv, yv)
            dp = -p * lam - dLdz
            # dF_i/dlam_i = z_i and dlam/drho = lam
            dmu_rho = -np.sum(p * zv, axis=0) * lam - g_rho
            parts = [dmu_rho, -g_ts] + ([-g_tf] if has_fwd else [])
            return dp, np.concatenate(parts)

        p = np.zeros((B, obs.d_z))
        mu = np.zeros(obs.d_z + n_t + n_f)
        hb = -h
        for k in range(n1 - 2, -1, -1):
            z1, zm, z0 = Z[:, k + 1], _interp_mid(Z, k), Z[:, k]
            x1, xm, x0 = ds.x[:, k + 1], _interp_mid(ds.x, k), ds.x[:, k]
            y1 = ysum[:, k + 1]
            y0 = ysum[:, k]
            ym = 0.5 * (y0 + y1)
            dp1, dm1 = rhs(p, z1, x1, y1)
            dp2, dm2 = rhs(p + (hb / 2.0) * dp1, zm, xm, ym)
            dp3, dm3 = rhs(p + (hb / 2.0) * dp2, zm, xm, ym)
            dp4, dm4 = rhs(p + hb * dp3, z0, x0, y0)
            p = p + (hb / 6.0) * (dp1 + 2.0 * dp2 + 2.0 * dp3 + dp4)
            mu = mu + (hb / 6.0) * (dm1 + 2.0 * dm2 + 2.0 * dm3 + dm4)
        # mu now holds mu(t0), which is the gradient
        breakdown = LossBreakdown.combine(
            data, reg=reg, pde=pde, fwd=fwd, gamma=config.gamma, pde_weight=config.pde_weight
        )
        return breakdown, mu

    if isinstance(obs, LuenbergerObserver):
        if config.loss_mode != "lagrange":
            raise ValueError("the Luenberger observer trains on the lagrange loss")
        Y = ds.y
        Xh = _luen_rollout(obs, Y, np.zeros((B, obs.n_x)), grid)
        diff = Xh - ds.x
        data = float(np.sum(w[None, :] * np.sum(diff * diff, axis=-1))) / B

        spec, params = obs.ghat.spec, obs.ghat.params
        A = obs.A
        GC = obs.G @ obs.C

        def rhs(p, xhv, xv):
            _, cache = forward(spec, params, xhv)
            gp, gx = backward(spec, params, cache, p)
            dp = -(p @ A + gx - p @ GC) - (2.0 / B) * (xhv - xv)
            return dp, -gp

        p = np.zeros((B, obs.n_x))
        mu = np.zeros(spec.n_params)
        hb = -h
        for k in range(n1 - 2, -1, -1):
            xh1, xhm, xh0 = Xh[:, k + 1], _interp_mid(Xh, k), Xh[:, k]
            x1, xm, x0v = ds.x[:, k + 1], _interp_mid(ds.x, k), ds.x[:, k]
            dp1, dm1 = rhs(p, xh1, x1)
            dp2, dm2 = rhs(p + (hb / 2.0) * dp1, xhm, xm)
            dp3, dm3 = rhs(p + (hb / 2.0) * dp2, xhm, xm)
            dp4, dm4 = rhs(p + hb * dp3, xh0, x0v)
            p = p + (hb / 6.0) * (dp1 + 2.0 * dp2 + 2.0 * dp3 + dp4)
            mu = mu + (hb / 6.0) * (dm1 + 2.0 * dm2 + 2.0 * dm3 + dm4)
        return LossBreakdown.combine(data), mu

    raise TypeError(f"not an observer: {type(obs)!r}")


# ---------------------------------------------------------------------------
# optimization loop


@dataclass
class TrainState:
    """Optimizer state carried across checkpoint/resume boundaries."""

    epoch: int
    lr: float
    step: int
    m: Array
    v: Array

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "epoch": self.epoch,
            "lr": self.lr,
            "step": self.step,
            "m": self.m.tolist(),
            "v": self.v.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainState":
        if d.get("format_version") != 1:
            raise ValueError(f"unsupported train state version {d.get('format_version')!r}")
        return TrainState(
            epoch=int(d["epoch"]),
            lr=float(d["lr"]),
            step=int(d["step"]),
            m=np.asarray(d["m"], dtype=float),
            v=np.asarray(d["v"], dtype=float),
        )


def save_train_state(state: TrainState, path) -> None:
    with open(path, "w") as fh:
        json.dump(state.to_dict(), fh)
        fh.write("\n")


def load_train_state(path) -> TrainState:
    with open(path) as fh:
        return TrainState.from_dict(json.load(fh))


def train(
    obs,
    ds: Dataset,
    config: TrainConfig,
    sys: SystemSpec | None = None,
    state: TrainState | None = None,
    callback=None,
):
    """Run the optimizer; returns (trained observer, loss history).

    Batches are whole trajectories; the data itself is fixed, only the
    batch order reshuffles per epoch (seeded by config.seed).  Passing a
    ``state`` resumes mid-run: the epoch counter, learning rate, and Adam
    moments all continue where they left off.
    """
    vec = pack_params(obs)
    grad_fn = grad_backprop if config.gradient_mode == "backprop" else grad_adjoint
    frozen = _frozen_slice_mask(obs, config)

    if state is None:
        state = TrainState(
            epoch=0, lr=config.learning_rate, step=0, m=np.zeros_like(vec), v=np.zeros_like(vec)
        )
    if state.m.shape != vec.shape:
        raise ValueError("train state does not match the observer's parameter count")

    rng = np.random.default_rng(config.seed)
    # fast-forward the shuffle stream so a resumed run sees the same batch
    # order it would have seen uninterrupted
    for _ in range(state.epoch):
        rng.permutation(ds.n_traj)

    B = ds.n_traj
    bs = config.batch_size if 0 < config.batch_size < B else B
    history: list[LossBreakdown] = []

    for epoch in range(state.epoch, config.epochs):
        order = rng.permutation(B) if bs < B else np.arange(B)
        acc = np.zeros(5)
        seen = 0
        for start in range(0, B, bs):
            idx = order[start : start + bs]
            cur = with_params(obs, vec)
            breakdown, grad = grad_fn(cur, ds.subset(idx), config, sys)
            if not np.isfinite(breakdown.total):
                raise TrainingDivergence(epoch, f"loss={breakdown.total}")
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergence(epoch, "non-finite gradient")
            if config.weight_decay > 0.0:
                grad = grad + config.weight_decay * vec
            if frozen is not None:
                grad = grad.copy()
                grad[frozen] = 0.0
            state.step += 1
            if config.optimizer == "adam":
                state.m = config.beta1 * state.m + (1.0 - config.beta1) * grad
                state.v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
                mhat = state.m / (1.0 - config.beta1**state.step)
                vhat = state.v / (1.0 - config.beta2**state.step)
                vec = vec - state.lr * mhat / (np.sqrt(vhat) + config.eps)
            else:
                vec = vec - state.lr * grad
            k = len(idx)
            acc += k * np.array(
                [breakdown.data, breakdown.reg, breakdown.pde, breakdown.fwd, breakdown.total]
            )
            seen += k
        state.lr *= config.lr_decay
        state.epoch = epoch + 1
        avg = acc / seen
        history.append(LossBreakdown(data=avg[0], reg=avg[1], pde=avg[2], fwd=avg[3], total=avg[4]))
        if callback is not None:
            callback(epoch, history[-1])
        if (
            config.checkpoint_every > 0
            and config.checkpoint_dir is not None
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            save_observer(with_params(obs, vec), os.path.join(config.checkpoint_dir, "checkpoint.json"))
            save_train_state(state, os.path.join(config.checkpoint_dir, "train_state.json"))

    return with_params(obs, vec), history


def write_loss_csv(history: list[LossBreakdown], path, start_epoch: int = 1, append: bool = False) -> None:
    """Loss history CSV: epoch,data,reg,pde,fwd,total."""
    mode = "a" if append else "w"
    with open(path, mode, newline="\n") as fh:
        if not append:
            fh.write("epoch,data,reg,pde,fwd,total\n")
        for i, b in enumerate(history):
            vals = ",".join(f"{v:.17g}" for v in (b.data, b.reg, b.pde, b.fwd, b.total))
            fh.write(f"{start_epoch + i},{vals}\n")
