"""Benchmark dynamical systems, disturbance models, and excitation signals.

Every system is a continuous-time ODE

    dx/dt = f(t, x) [+ g(x) u],    y = h(x),

packaged as a :class:`SystemSpec`.  Drift and output functions are
vectorized: they accept states of shape ``(..., n_x)`` and return arrays
with matching leading axes.  The ``domain`` box is what initial conditions
are sampled from (uniformly) when generating data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

Array = np.ndarray

NOISE_KINDS = ("none", "gaussian", "uniform", "truncated_gaussian")
NOISE_TARGETS = ("measurement", "process")
EXCITATION_KINDS = ("none", "cosine")

# how many standard deviations out the truncated gaussian is cut; this is
# what makes its samples bounded, which the robustness bound relies on
TRUNCATION_SIGMAS = 4.0


@dataclass(frozen=True)
class SystemSpec:
    """A dynamical system with measurement map and sampling domain.

    ``input_map`` is only set for systems with a control channel; it maps
    states ``(..., n_x)`` to gain matrices ``(..., n_x, n_u)``.
    """

    name: str
    n_x: int
    n_y: int
    drift: Callable[[float, Array], Array]
    output: Callable[[Array], Array]
    domain: Array
    n_u: int = 0
    input_map: Callable[[Array], Array] | None = None

    def __post_init__(self):
        dom = np.asarray(self.domain, dtype=float)
        if dom.shape != (self.n_x, 2):
            raise ValueError(f"domain must have shape ({self.n_x}, 2), got {dom.shape}")
        if np.any(dom[:, 0] > dom[:, 1]):
            raise ValueError("domain lower bounds exceed upper bounds")
        object.__setattr__(self, "domain", dom)
        if (self.n_u > 0) != (self.input_map is not None):
            raise ValueError("n_u and input_map must be set together")
        # probe once at the domain center so shape bugs surface early
        x_mid = dom.mean(axis=1)
        fx = np.asarray(self.drift(0.0, x_mid))
        if fx.shape != (self.n_x,):
            raise ValueError(f"drift returns shape {fx.shape}, expected ({self.n_x},)")
        hx = np.asarray(self.output(x_mid))
        if hx.shape != (self.n_y,):
            raise ValueError(f"output returns shape {hx.shape}, expected ({self.n_y},)")
        if self.input_map is not None:
            gx = np.asarray(self.input_map(x_mid))
            if gx.shape != (self.n_x, self.n_u):
                raise ValueError(
                    f"input_map returns shape {gx.shape}, expected ({self.n_x}, {self.n_u})"
                )


@dataclass(frozen=True)
class NoiseSpec:
    """Additive disturbance description.

    kind:   one of none | gaussian | uniform | truncated_gaussian
    target: "measurement" corrupts y, "process" perturbs the drift
    std / mean parameterize the gaussian kinds; lo / hi the uniform kind.
    The truncated gaussian is cut at +-4 std around the mean (resampled,
    not clipped, so the distribution stays smooth inside the cut).
    """

    kind: str = "none"
    target: str = "measurement"
    std: float = 0.0
    mean: float = 0.0
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.target not in NOISE_TARGETS:
            raise ValueError(f"unknown noise target {self.target!r}")
        if self.kind in ("gaussian", "truncated_gaussian") and self.std < 0:
            raise ValueError("std must be nonnegative")
        if self.kind == "uniform" and self.lo > self.hi:
            raise ValueError("uniform noise needs lo <= hi")

    @property
    def is_active(self) -> bool:
        return self.kind != "none"

    def amplitude_bound(self) -> float:
        """Hard bound on |sample| when one exists, else +inf (gaussian)."""
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform":
            return max(abs(self.lo), abs(self.hi))
        if self.kind == "truncated_gaussian":
            return abs(self.mean) + TRUNCATION_SIGMAS * self.std
        return np.inf


@dataclass(frozen=True)
class ExcitationSpec:
    """Scalar input signal u(t); only the autonomous-or-cosine cases exist."""

    kind: str = "none"
    amplitude: float = 1.0
    frequency: float = 1.0

    def __post_init__(self):
        if self.kind not in EXCITATION_KINDS:
            raise ValueError(f"unknown excitation kind {self.kind!r}")
        if self.frequency < 0:
            raise ValueError("frequency must be nonnegative")

    @property
    def is_active(self) -> bool:
        return self.kind != "none"

    def __call__(self, t) -> Array:
        """Evaluate u(t); t may be scalar or an array of times."""
        t = np.asarray(t, dtype=float)
        if self.kind == "none":
            return np.zeros(t.shape + (1,))
        return (self.amplitude * np.cos(self.frequency * t))[..., None]


def sample_noise(spec: NoiseSpec, dim: int, rng: np.random.Generator, n: int | None = None) -> Array:
    """Draw one noise vector of length ``dim`` (or ``(n, dim)`` when n given).

    Same spec + same generator state => identical samples, which is what
    paired noise comparisons across observers rely on.
    """
    shape = (dim,) if n is None else (n, dim)
    if spec.kind == "none":
        return np.zeros(shape)
    if spec.kind == "gaussian":
        return rng.normal(spec.mean, spec.std, size=shape)
    if spec.kind == "uniform":
        return rng.uniform(spec.lo, spec.hi, size=shape)
    # truncated gaussian: resample anything outside mean +- 4 std
    out = rng.normal(spec.mean, spec.std, size=shape)
    if spec.std > 0:
        cut = TRUNCATION_SIGMAS * spec.std
        bad = np.abs(out - spec.mean) > cut
        while np.any(bad):
            out[bad] = rng.normal(spec.mean, spec.std, size=int(bad.sum()))
            bad = np.abs(out - spec.mean) > cut
    return out


def sample_initial_states(spec: SystemSpec, n: int, rng: np.random.Generator) -> Array:
    """Uniform draws from the system's domain box, shape (n, n_x)."""
    lo, hi = spec.domain[:, 0], spec.domain[:, 1]
    return rng.uniform(lo, hi, size=(n, spec.n_x))


def make_example1() -> SystemSpec:
    """Planar system with bounded trigonometric nonlinearity and y = x1."""

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return np.stack(
            [x[..., 1] + np.sin(x[..., 0]), -x[..., 0] + np.cos(x[..., 1])], axis=-1
        )

    def output(x):
        return np.asarray(x, dtype=float)[..., :1]

    return SystemSpec(
        name="example1",
        n_x=2,
        n_y=1,
        drift=drift,
        output=output,
        domain=np.array([[-5.0, 5.0], [-5.0, 5.0]]),
    )


def make_vanderpol(mu: float = 1.0, domain: Array | None = None) -> SystemSpec:
    """Van der Pol oscillator, y = x1; default sampling box [-1,1]^2."""

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, mu * (1.0 - x1**2) * x2 - x1], axis=-1)

    def output(x):
        return np.asarray(x, dtype=float)[..., :1]

    if domain is None:
        domain = np.array([[-1.0, 1.0], [-1.0, 1.0]])
    return SystemSpec(
        name="vanderpol", n_x=2, n_y=1, drift=drift, output=output, domain=np.asarray(domain, float)
    )


def make_duffing(domain: Array | None = None) -> SystemSpec:
    """Reverse Duffing oscillator: dx1 = x2^3, dx2 = -x1, y = x1.

    Trajectories stay on level sets of 2 x1^2 + x2^4, so every orbit is
    bounded.  Carries a constant input channel g = (0, 1)^T used by the
    non-autonomous experiments.
    """

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 1] ** 3, -x[..., 0]], axis=-1)

    def output(x):
        return np.asarray(x, dtype=float)[..., :1]

    def input_map(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = 1.0
        return g

    if domain is None:
        domain = np.array([[-1.0, 1.0], [-1.0, 1.0]])
    return SystemSpec(
        name="duffing",
        n_x=2,
        n_y=1,
        drift=drift,
        output=output,
        domain=np.asarray(domain, float),
        n_u=1,
        input_map=input_map,
    )


def make_linear(A: Array, C: Array, domain: Array | None = None) -> SystemSpec:
    """Linear system dx = Ax, y = Cx; the closed-form reference case."""
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got {A.shape}")
    n = A.shape[0]
    if C.ndim != 2 or C.shape[1] != n:
        raise ValueError(f"C must have {n} columns, got {C.shape}")

    def drift(t, x):
        return np.asarray(x, dtype=float) @ A.T

    def output(x):
        return np.asarray(x, dtype=float) @ C.T

    if domain is None:
        domain = np.repeat([[-1.0, 1.0]], n, axis=0)
    return SystemSpec(
        name="linear", n_x=n, n_y=C.shape[0], drift=drift, output=output, domain=np.asarray(domain, float)
    )


_REGISTRY = {
    "example1": make_example1,
    "vanderpol": make_vanderpol,
    "duffing": make_duffing,
    "linear": make_linear,
}


def make_system(name: str, **kwargs) -> SystemSpec:
    """Build a catalog system by name; kwargs go to the specific factory."""
    if name not in _REGISTRY:
        raise ValueError(f"unknown system {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**kwargs)
