"""State observers: latent-contraction (KKL-style) and Luenberger-like.

The KKL-style observer integrates a stable filter of the measurements,

    dz/dt = D z + F y,        x_hat = tstar(z),

with D = diag(lambda), lambda_i = -exp(rho_i) so the eigenvalues stay
strictly negative no matter what the optimizer does to rho, and F fixed to
the all-ones matrix.  ``tstar`` is the learned inverse of the (implicit)
contraction map; an optional forward net ``t_fwd`` approximates the map
itself and enables the non-autonomous correction term and consistency
losses.

The Luenberger-like observer assumes partially known dynamics,

    dx_hat/dt = A x_hat + ghat(x_hat) + G (y - C x_hat),

with a learned residual ``ghat`` and an output-injection gain G chosen so
A - G C is Hurwitz (checked at construction).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .integrate import DivergenceError, TimeGrid, Trajectory
from .net import MlpNet, MlpSpec, init_params, jvp, net_from_dict, net_to_dict
from .systems import SystemSpec

Array = np.ndarray


def kkl_dim(n_x: int, n_y: int) -> int:
    """Latent dimension n_y * (n_x + 1) that guarantees an injective map."""
    if n_x < 1 or n_y < 1:
        raise ValueError("dimensions must be positive")
    return n_y * (n_x + 1)


@dataclass(frozen=True)
class KklObserver:
    n_x: int
    n_y: int
    rho: Array
    tstar: MlpNet
    t_fwd: MlpNet | None = None

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.ndim != 1 or not np.all(np.isfinite(rho)):
            raise ValueError("rho must be a finite 1-D vector")
        object.__setattr__(self, "rho", rho)
        if self.tstar.spec.n_in != self.d_z or self.tstar.spec.n_out != self.n_x:
            raise ValueError(
                f"tstar must map {self.d_z} -> {self.n_x}, got "
                f"{self.tstar.spec.n_in} -> {self.tstar.spec.n_out}"
            )
        if self.t_fwd is not None and (
            self.t_fwd.spec.n_in != self.n_x or self.t_fwd.spec.n_out != self.d_z
        ):
            raise ValueError(
                f"t_fwd must map {self.n_x} -> {self.d_z}, got "
                f"{self.t_fwd.spec.n_in} -> {self.t_fwd.spec.n_out}"
            )

    @property
    def d_z(self) -> int:
        return self.rho.shape[0]

    @property
    def F(self) -> Array:
        return np.ones((self.d_z, self.n_y))


def d_eigenvalues(obs: KklObserver) -> Array:
    """Eigenvalues of D; negative by construction."""
    return -np.exp(obs.rho)


def make_kkl_observer(
    n_x: int,
    n_y: int,
    rng: np.random.Generator,
    d_z: int | None = None,
    hidden: tuple[int, ...] = (50, 50, 50, 50),
    activation: str = "tanh",
    eigenvalues: Array | None = None,
    with_forward_map: bool = False,
) -> KklObserver:
    """Fresh observer with random nets; latent size defaults to kkl_dim."""
    if d_z is None:
        d_z = kkl_dim(n_x, n_y)
    if eigenvalues is None:
        eigenvalues = -np.arange(1.0, d_z + 1.0)
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.shape != (d_z,) or np.any(lam >= 0):
        raise ValueError("eigenvalues must be a length-d_z vector of negative reals")
    rho = np.log(-lam)
    tstar_spec = MlpSpec((d_z, *hidden, n_x), activation)
    tstar = MlpNet(tstar_spec, init_params(tstar_spec, rng))
    t_fwd = None
    if with_forward_map:
        fwd_spec = MlpSpec((n_x, *hidden, d_z), activation)
        t_fwd = MlpNet(fwd_spec, init_params(fwd_spec, rng))
    return KklObserver(n_x=n_x, n_y=n_y, rho=rho, tstar=tstar, t_fwd=t_fwd)


def latent_drift(obs: KklObserver, z: Array, y: Array) -> Array:
    """dz/dt = D z + F y with diagonal D and all-ones F; batched."""
    lam = d_eigenvalues(obs)
    y = np.asarray(y, dtype=float)
    return lam * z + y.sum(axis=-1, keepdims=True)


def latent_drift_nonauto(
    obs: KklObserver, sys: SystemSpec, z: Array, y: Array, u: Array
) -> Array:
    """Latent drift plus the input correction phi(z) u.

    phi(z) = J_tfwd(tstar(z)) g(tstar(z)); the product phi(z) u is computed
    as a directional derivative of the forward map, so no Jacobian is ever
    materialized.  Requires the observer's forward net and the system's
    input channel.
    """
    if obs.t_fwd is None:
        raise ValueError("non-autonomous drift needs an observer with a forward map")
    if sys.input_map is None:
        raise ValueError(f"system {sys.name!r} has no input channel")
    xhat = obs.tstar(z)
    gu = np.squeeze(sys.input_map(xhat) @ np.asarray(u, dtype=float)[..., None], axis=-1)
    _, phi_u, _ = jvp(obs.t_fwd.spec, obs.t_fwd.params, xhat, gu)
    return latent_drift(obs, z, y) + phi_u


@dataclass(frozen=True)
class LuenbergerObserver:
    A: Array
    C: Array
    G: Array
    ghat: MlpNet

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        C = np.asarray(self.C, dtype=float)
        G = np.asarray(self.G, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        if C.ndim != 2 or C.shape[1] != n:
            raise ValueError(f"C must have {n} columns")
        if G.shape != (n, C.shape[0]):
            raise ValueError(f"G must have shape ({n}, {C.shape[0]})")
        eig = np.linalg.eigvals(A - G @ C)
        if np.any(eig.real >= 0):
            raise ValueError(f"A - G C must be Hurwitz; eigenvalues {eig}")
        if self.ghat.spec.n_in != n or self.ghat.spec.n_out != n:
            raise ValueError(f"ghat must map {n} -> {n}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "G", G)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]


def make_luenberger_observer(
    A: Array,
    C: Array,
    G: Array,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (16,),
    activation: str = "tanh",
) -> LuenbergerObserver:
    n = np.asarray(A).shape[0]
    spec = MlpSpec((n, *hidden, n), activation)
    return LuenbergerObserver(A=A, C=C, G=G, ghat=MlpNet(spec, init_params(spec, rng)))


def luenberger_drift(obs: LuenbergerObserver, xhat: Array, y: Array) -> Array:
    """dx_hat/dt = A x_hat + ghat(x_hat) + G (y - C x_hat); batched."""
    xhat = np.asarray(xhat, dtype=float)
    y = np.asarray(y, dtype=float)
    innov = y - xhat @ obs.C.T
    return xhat @ obs.A.T + obs.ghat(xhat) + innov @ obs.G.T


def estimate(obs, z: Array) -> Array:
    """Map observer state to a state estimate (identity for Luenberger)."""
    if isinstance(obs, KklObserver):
        return obs.tstar(z)
    return np.asarray(z, dtype=float)


def rollout_latent(
    obs,
    y_series: Array,
    z0: Array,
    grid: TimeGrid,
    u_series: Array | None = None,
    sys: SystemSpec | None = None,
) -> Array:
    """Integrate the observer state driven by recorded measurements.

    Measurements (and inputs, if any) live on the grid; RK4 midpoint stages
    use the average of the bracketing samples.  Returns the observer state
    at every grid point, shape (n_steps + 1, dim).
    """
    Y = np.asarray(y_series, dtype=float)
    n = grid.n_steps
    if Y.shape[0] != n + 1:
        raise ValueError(f"need {n + 1} measurement rows, got {Y.shape[0]}")
    z = np.asarray(z0, dtype=float)
    out = np.empty((n + 1, z.shape[0]))
    out[0] = z

    nonauto = u_series is not None
    if nonauto and not isinstance(obs, KklObserver):
        raise ValueError("input-driven rollout is only defined for the latent observer")

    def f(zs, ys, us):
        if isinstance(obs, KklObserver):
            if nonauto:
                return latent_drift_nonauto(obs, sys, zs, ys, us)
            return latent_drift(obs, zs, ys)
        return luenberger_drift(obs, zs, ys)

    h = grid.h
    for k in range(n):
        y0, y1 = Y[k], Y[k + 1]
        ym = 0.5 * (y0 + y1)
        if nonauto:
            u0, u1 = u_series[k], u_series[k + 1]
            um = 0.5 * (u0 + u1)
        else:
            u0 = um = u1 = None
        k1 = f(z, y0, u0)
        k2 = f(z + (h / 2.0) * k1, ym, um)
        k3 = f(z + (h / 2.0) * k2, ym, um)
        k4 = f(z + h * k3, y1, u1)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(k + 1, grid.t0 + (k + 1) * h)
        out[k + 1] = z
    return out


def run_observer(
    obs,
    y_series: Array,
    z0: Array,
    grid: TimeGrid,
    u_series: Array | None = None,
    sys: SystemSpec | None = None,
) -> Trajectory:
    """Rollout plus estimate map; returns the state-estimate trajectory."""
    Z = rollout_latent(obs, y_series, z0, grid, u_series=u_series, sys=sys)
    return Trajectory(grid=grid, states=estimate(obs, Z))


def observer_to_dict(obs) -> dict:
    if isinstance(obs, KklObserver):
        return {
            "format_version": 1,
            "type": "kkl",
            "n_x": obs.n_x,
            "n_y": obs.n_y,
            "d_z": obs.d_z,
            "rho": obs.rho.tolist(),
            "tstar": net_to_dict(obs.tstar),
            "t_fwd": None if obs.t_fwd is None else net_to_dict(obs.t_fwd),
        }
    if isinstance(obs, LuenbergerObserver):
        return {
            "format_version": 1,
            "type": "luenberger",
            "n_x": obs.n_x,
            "n_y": obs.n_y,
            "A": obs.A.tolist(),
            "C": obs.C.tolist(),
            "G": obs.G.tolist(),
            "ghat": net_to_dict(obs.ghat),
        }
    raise TypeError(f"not an observer: {type(obs)!r}")


def observer_from_dict(d: dict):
    if d.get("format_version") != 1:
        raise ValueError(f"unsupported observer format_version {d.get('format_version')!r}")
    kind = d.get("type")
    if kind == "kkl":
        return KklObserver(
            n_x=int(d["n_x"]),
            n_y=int(d["n_y"]),
            rho=np.asarray(d["rho"], dtype=float),
            tstar=net_from_dict(d["tstar"]),
            t_fwd=None if d.get("t_fwd") is None else net_from_dict(d["t_fwd"]),
        )
    if kind == "luenberger":
        return LuenbergerObserver(
            A=np.asarray(d["A"], dtype=float),
            C=np.asarray(d["C"], dtype=float),
            G=np.asarray(d["G"], dtype=float),
            ghat=net_from_dict(d["ghat"]),
        )
    raise ValueError(f"unknown observer type {kind!r}")


def save_observer(obs, path) -> None:
    with open(path, "w") as fh:
        json.dump(observer_to_dict(obs), fh)
        fh.write("\n")


def load_observer(path):
    with open(path) as fh:
        return observer_from_dict(json.load(fh))
