"""Small fully connected networks with hand-rolled differentiation.

Everything works on flat parameter vectors so that observers can expose a
single vector to the optimizer.  The layout is frozen: for layers
i = 1..L with sizes [d0, d1, ..., dL], the vector holds

    W1.ravel(), b1, W2.ravel(), b2, ..., WL.ravel(), bL

with each Wi of shape (d_i, d_{i-1}) in row-major order.  Checkpoints
store this same vector, so the layout is part of the file format.

Hidden layers apply the activation; the output layer is linear.  All maps
accept inputs with arbitrary leading axes, e.g. (batch, time, d_in).

The derivative conventions: ``backward`` computes vector-Jacobian products
(reverse mode), ``jvp`` computes Jacobian-vector products (forward mode),
and ``jvp_backward`` runs reverse mode over the forward-tangent pass, which
yields gradients of losses that depend on directional derivatives of the
network.  ReLU uses subgradient 0 at the kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: layer sizes (input first, output last) and activation."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(
            (fi + 1) * fo for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )


@dataclass(frozen=True)
class MlpNet:
    """A spec bundled with one concrete parameter vector."""

    spec: MlpSpec
    params: Array

    def __post_init__(self):
        p = np.asarray(self.params, dtype=float)
        check_params(self.spec, p)
        object.__setattr__(self, "params", p)

    def __call__(self, x: Array) -> Array:
        return forward(self.spec, self.params, x)[0]


def check_params(spec: MlpSpec, params: Array) -> None:
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise ValueError("parameter vector contains non-finite values")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Array:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    chunks = []
    for fi, fo in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fi)
        chunks.append(rng.uniform(-bound, bound, size=fo * fi))
        chunks.append(np.zeros(fo))
    return np.concatenate(chunks)


def split_params(spec: MlpSpec, params: Array) -> list[tuple[Array, Array]]:
    """Views (W_i, b_i) into the flat vector, in layer order."""
    out = []
    ofs = 0
    for fi, fo in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = params[ofs : ofs + fo * fi].reshape(fo, fi)
        ofs += fo * fi
        b = params[ofs : ofs + fo]
        ofs += fo
        out.append((W, b))
    return out


def _act(spec: MlpSpec, s: Array) -> Array:
    if spec.activation == "tanh":
        return np.tanh(s)
    return np.maximum(s, 0.0)


def _act_deriv(spec: MlpSpec, a: Array) -> Array:
    # derivative expressed through the post-activation value
    if spec.activation == "tanh":
        return 1.0 - a * a
    return (a > 0.0).astype(a.dtype)


def _act_second_deriv(spec: MlpSpec, a: Array) -> Array:
    if spec.activation == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(a)


def forward(spec: MlpSpec, params: Array, x: Array) -> tuple[Array, tuple]:
    """Evaluate the network; cache holds per-layer inputs for backward."""
    layers = split_params(spec, params)
    a = np.asarray(x, dtype=float)
    acts = [a]
    for i, (W, b) in enumerate(layers):
        s = a @ W.T + b
        if i < len(layers) - 1:
            a = _act(spec, s)
            acts.append(a)
        else:
            a = s
    return a, tuple(acts)


def backward(
    spec: MlpSpec, params: Array, cache: tuple, grad_output: Array
) -> tuple[Array, Array]:
    """Vector-Jacobian product: gradients w.r.t. params and input.

    ``grad_output`` must match the forward output's shape; contributions
    from all leading axes are summed into the parameter gradient.
    """
    layers = split_params(spec, params)
    acts = cache
    grad = np.zeros_like(params)
    gviews = split_params(spec, grad)
    delta = np.asarray(grad_output, dtype=float)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = gviews[i]
        a_prev = acts[i]
        d2 = delta.reshape(-1, delta.shape[-1])
        a2 = a_prev.reshape(-1, a_prev.shape[-1])
        gW += d2.T @ a2
        gb += d2.sum(axis=0)
        delta = delta @ W
        if i > 0:
            delta = delta * _act_deriv(spec, a_prev)
    return grad, delta


def jacobian_input(spec: MlpSpec, params: Array, x: Array) -> Array:
    """Jacobian dy/dx at a single point, shape (n_out, n_in)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n_in,):
        raise ValueError(f"expected a single input of shape ({spec.n_in},)")
    _, cache = forward(spec, params, x)
    rows = []
    for j in range(spec.n_out):
        e = np.zeros(spec.n_out)
        e[j] = 1.0
        _, gx = backward(spec, params, cache, e)
        rows.append(gx)
    return np.stack(rows)


def jvp(spec: MlpSpec, params: Array, x: Array, v: Array) -> tuple[Array, Array, tuple]:
    """Forward pass together with the directional derivative along v.

    Returns (y, J(x) v, cache); the cache feeds ``jvp_backward``.
    """
    layers = split_params(spec, params)
    a = np.asarray(x, dtype=float)
    t = np.asarray(v, dtype=float)
    acts = [a]
    tangents = [t]
    pre_tangents = []
    for i, (W, b) in enumerate(layers):
        s = a @ W.T + b
        u = t @ W.T
        if i < len(layers) - 1:
            a = _act(spec, s)
            t = _act_deriv(spec, a) * u
            acts.append(a)
            tangents.append(t)
            pre_tangents.append(u)
        else:
            a, t = s, u
    return a, t, (tuple(acts), tuple(tangents), tuple(pre_tangents))


def jvp_backward(
    spec: MlpSpec,
    params: Array,
    cache: tuple,
    grad_y: Array | None,
    grad_jv: Array,
) -> tuple[Array, Array, Array]:
    """Reverse mode through ``jvp``.

    Computes gradients of <grad_y, y> + <grad_jv, J(x) v> with respect to
    the parameters, x, and v.  This is what losses built on directional
    derivatives of the network need; the second derivative of the
    activation enters through the tangent path.
    """
    layers = split_params(spec, params)
    acts, tangents, pre_tangents = cache
    grad = np.zeros_like(params)
    gviews = split_params(spec, grad)

    t_last = tangents[-1]
    a_bar = (
        np.zeros(t_last.shape[:-1] + (spec.n_out,))
        if grad_y is None
        else np.asarray(grad_y, dtype=float)
    )
    t_bar = np.asarray(grad_jv, dtype=float)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = gviews[i]
        a_prev, t_prev = acts[i], tangents[i]
        d2 = a_bar.reshape(-1, a_bar.shape[-1])
        u2 = t_bar.reshape(-1, t_bar.shape[-1])
        gW += d2.T @ a_prev.reshape(-1, a_prev.shape[-1])
        gW += u2.T @ t_prev.reshape(-1, t_prev.shape[-1])
        gb += d2.sum(axis=0)
        a_bar = a_bar @ W
        t_bar = t_bar @ W
        if i > 0:
            a = acts[i]
            u = pre_tangents[i - 1]
            sp = _act_deriv(spec, a)
            spp = _act_second_deriv(spec, a)
            # s_bar collects both paths into the pre-activation: through the
            # value sigma(s) and through the tangent factor sigma'(s)
            a_bar, t_bar = sp * a_bar + spp * u * t_bar, sp * t_bar
    return grad, a_bar, t_bar


def lipschitz_upper_bound(spec: MlpSpec, params: Array, iters: int = 100, tol: float = 1e-8) -> float:
    """Product of layer spectral norms (activations are 1-Lipschitz).

    Spectral norms come from power iteration with a deterministic start,
    so repeated calls agree exactly.
    """
    bound = 1.0
    for W, _ in split_params(spec, params):
        v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
        sigma = 0.0
        for _ in range(iters):
            u = W @ v
            nu = np.linalg.norm(u)
            if nu < 1e-300:
                sigma = 0.0
                break
            u /= nu
            v = W.T @ u
            new_sigma = np.linalg.norm(v)
            if new_sigma < 1e-300:
                sigma = 0.0
                break
            v /= new_sigma
            if abs(new_sigma - sigma) <= tol * max(1.0, new_sigma):
                sigma = new_sigma
                break
            sigma = new_sigma
        bound *= sigma
    return float(bound)


def net_to_dict(net: MlpNet) -> dict:
    return {
        "format_version": 1,
        "layer_sizes": list(net.spec.layer_sizes),
        "activation": net.spec.activation,
        "params": net.params.tolist(),
    }


def net_from_dict(d: dict) -> MlpNet:
    if d.get("format_version") != 1:
        raise ValueError(f"unsupported net format_version {d.get('format_version')!r}")
    spec = MlpSpec(tuple(d["layer_sizes"]), d["activation"])
    return MlpNet(spec, np.asarray(d["params"], dtype=float))
