import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from odekkl.net import (
    MlpNet,
    MlpSpec,
    backward,
    check_params,
    forward,
    init_params,
    jacobian_input,
    jvp,
    jvp_backward,
    lipschitz_upper_bound,
    net_from_dict,
    net_to_dict,
    split_params,
)


def n_params(sizes):
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        MlpSpec((2, 4, 1), "sigmoid")


def test_init_minimal_spec():
    spec = MlpSpec((1, 1))
    p = init_params(spec, np.random.default_rng(0))
    assert p.shape == (2,)
    assert p[1] == 0.0  # bias


def test_init_weights_fan_in_bounded():
    spec = MlpSpec((4, 8, 2))
    p = init_params(spec, np.random.default_rng(0))
    for (W, b), fan_in in zip(split_params(spec, p), (4, 8)):
        assert np.all(np.abs(W) <= 1.0 / np.sqrt(fan_in))
        np.testing.assert_array_equal(b, 0.0)


def test_init_same_seed_identical():
    spec = MlpSpec((3, 5, 2))
    a = init_params(spec, np.random.default_rng(11))
    b = init_params(spec, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


@given(st.lists(st.integers(1, 30), min_size=2, max_size=5))
def test_param_count_formula(sizes):
    spec = MlpSpec(tuple(sizes))
    p = init_params(spec, np.random.default_rng(0))
    assert p.size == n_params(sizes)
    check_params(spec, p)


def test_check_params_rejects_bad_input():
    spec = MlpSpec((2, 3, 1))
    with pytest.raises(ValueError):
        check_params(spec, np.zeros(5))
    bad = np.zeros(n_params((2, 3, 1)))
    bad[0] = np.inf
    with pytest.raises(ValueError):
        check_params(spec, bad)


def test_param_layout_is_weights_then_biases_per_layer():
    spec = MlpSpec((2, 3, 1))
    p = np.arange(13, dtype=float)
    (W1, b1), (W2, b2) = split_params(spec, p)
    np.testing.assert_array_equal(W1, [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    np.testing.assert_array_equal(b1, [6.0, 7.0, 8.0])
    np.testing.assert_array_equal(W2, [[9.0, 10.0, 11.0]])
    np.testing.assert_array_equal(b2, [12.0])


def test_forward_zero_params_zero_output():
    spec = MlpSpec((2, 4, 3))
    y, _ = forward(spec, np.zeros(n_params((2, 4, 3))), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(y, np.zeros(3))


def test_forward_single_affine_layer():
    spec = MlpSpec((1, 1))
    y, _ = forward(spec, np.array([2.0, 1.0]), np.array([3.0]))
    np.testing.assert_array_equal(y, [7.0])


def test_forward_relu_hand_case():
    # W1 = [[2], [-3]], b1 = (0.5, 1), W2 = [[1, 2]], b2 = 0.25, x = 1:
    # pre = (2.5, -2) -> relu (2.5, 0) -> 2.5 + 0.25 = 2.75
    spec = MlpSpec((1, 2, 1), "relu")
    p = np.array([2.0, -3.0, 0.5, 1.0, 1.0, 2.0, 0.25])
    y, _ = forward(spec, p, np.array([1.0]))
    np.testing.assert_allclose(y, [2.75])


def test_forward_batched_matches_loop():
    spec = MlpSpec((3, 8, 2))
    p = init_params(spec, np.random.default_rng(1))
    X = np.random.default_rng(2).normal(size=(6, 3))
    Y, _ = forward(spec, p, X)
    for i in range(6):
        yi, _ = forward(spec, p, X[i])
        np.testing.assert_allclose(Y[i], yi, rtol=1e-12, atol=1e-15)


def test_mlp_net_callable_bundle():
    spec = MlpSpec((2, 4, 1))
    p = init_params(spec, np.random.default_rng(3))
    net = MlpNet(spec, p)
    x = np.array([0.3, -0.4])
    np.testing.assert_array_equal(net(x), forward(spec, p, x)[0])


def test_backward_zero_cotangent():
    spec = MlpSpec((2, 5, 2))
    p = init_params(spec, np.random.default_rng(0))
    x = np.array([0.2, -0.1])
    _, cache = forward(spec, p, x)
    gp, gx = backward(spec, p, cache, np.zeros(2))
    np.testing.assert_array_equal(gp, np.zeros_like(p))
    np.testing.assert_array_equal(gx, np.zeros(2))


def test_backward_linear_layer_outer_product():
    spec = MlpSpec((3, 2))
    p = init_params(spec, np.random.default_rng(0))
    x = np.array([1.0, -2.0, 0.5])
    g = np.array([0.7, -0.3])
    _, cache = forward(spec, p, x)
    gp, gx = backward(spec, p, cache, g)
    (gW, gb) = split_params(spec, gp)[0]
    np.testing.assert_allclose(gW, np.outer(g, x))
    np.testing.assert_allclose(gb, g)
    np.testing.assert_allclose(gx, split_params(spec, p)[0][0].T @ g)


def central_fd(fn, vec, eps=1e-6):
    out = np.zeros_like(vec)
    for i in range(vec.size):
        up, dn = vec.copy(), vec.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (fn(up) - fn(dn)) / (2 * eps)
    return out


def test_backward_matches_finite_differences_tanh():
    spec = MlpSpec((2, 8, 2))
    p = init_params(spec, np.random.default_rng(5))
    x = np.array([0.4, -0.7])
    g = np.array([1.0, -2.0])

    def loss_p(q):
        y, _ = forward(spec, q, x)
        return float(g @ y)

    def loss_x(xq):
        y, _ = forward(spec, p, xq)
        return float(g @ y)

    _, cache = forward(spec, p, x)
    gp, gx = backward(spec, p, cache, g)
    fd_p = central_fd(loss_p, p)
    fd_x = central_fd(loss_x, x)
    assert np.max(np.abs(gp - fd_p)) / np.max(np.abs(fd_p)) < 1e-5
    assert np.max(np.abs(gx - fd_x)) / np.max(np.abs(fd_x)) < 1e-5


def test_backward_matches_finite_differences_relu():
    spec = MlpSpec((2, 8, 2), "relu")
    rng = np.random.default_rng(6)
    p = init_params(spec, rng)
    # keep pre-activations away from the kink so the derivative is classical
    x = np.array([0.9, -0.8])
    _, cache = forward(spec, p, x)
    g = np.array([0.5, 1.5])
    gp, gx = backward(spec, p, cache, g)

    def loss_p(q):
        y, _ = forward(spec, q, x)
        return float(g @ y)

    fd_p = central_fd(loss_p, p)
    assert np.max(np.abs(gp - fd_p)) / max(np.max(np.abs(fd_p)), 1e-12) < 1e-4


def test_jacobian_linear_layer_is_weight_matrix():
    spec = MlpSpec((3, 2))
    p = init_params(spec, np.random.default_rng(0))
    J = jacobian_input(spec, p, np.array([0.1, 0.2, 0.3]))
    np.testing.assert_allclose(J, split_params(spec, p)[0][0])


def test_jacobian_zero_params():
    spec = MlpSpec((3, 4, 2))
    J = jacobian_input(spec, np.zeros(n_params((3, 4, 2))), np.ones(3))
    np.testing.assert_array_equal(J, np.zeros((2, 3)))


def test_jacobian_matches_finite_differences():
    spec = MlpSpec((3, 10, 2))
    p = init_params(spec, np.random.default_rng(7))
    x = np.array([0.3, -0.2, 0.5])
    J = jacobian_input(spec, p, x)
    fd = np.zeros((2, 3))
    eps = 1e-6
    for j in range(3):
        up, dn = x.copy(), x.copy()
        up[j] += eps
        dn[j] -= eps
        fd[:, j] = (forward(spec, p, up)[0] - forward(spec, p, dn)[0]) / (2 * eps)
    assert np.max(np.abs(J - fd)) / np.max(np.abs(fd)) < 1e-5


def test_jvp_matches_jacobian_action():
    spec = MlpSpec((3, 6, 2))
    p = init_params(spec, np.random.default_rng(8))
    x = np.array([0.1, 0.4, -0.3])
    v = np.array([1.0, -1.0, 0.5])
    y, Jv, _ = jvp(spec, p, x, v)
    np.testing.assert_allclose(y, forward(spec, p, x)[0], rtol=1e-15, atol=0)
    np.testing.assert_allclose(Jv, jacobian_input(spec, p, x) @ v, rtol=1e-12, atol=1e-14)


def test_jvp_batched_shapes():
    spec = MlpSpec((2, 5, 3))
    p = init_params(spec, np.random.default_rng(9))
    X = np.random.default_rng(10).normal(size=(4, 2))
    V = np.random.default_rng(11).normal(size=(4, 2))
    y, Jv, _ = jvp(spec, p, X, V)
    assert y.shape == (4, 3) and Jv.shape == (4, 3)


def test_jvp_backward_matches_finite_differences():
    spec = MlpSpec((2, 6, 2))
    rng = np.random.default_rng(12)
    p = init_params(spec, rng)
    x = np.array([0.3, -0.5])
    v = np.array([0.8, 0.2])
    gy = np.array([1.0, -0.5])
    gjv = np.array([0.4, 1.2])

    def scalar(q, xq, vq):
        y, Jv, _ = jvp(spec, q, xq, vq)
        return float(gy @ y + gjv @ Jv)

    _, _, cache = jvp(spec, p, x, v)
    gp, gx, gv = jvp_backward(spec, p, cache, gy, gjv)
    fd_p = central_fd(lambda q: scalar(q, x, v), p)
    fd_x = central_fd(lambda xq: scalar(p, xq, v), x)
    fd_v = central_fd(lambda vq: scalar(p, x, vq), v)
    assert np.max(np.abs(gp - fd_p)) / np.max(np.abs(fd_p)) < 1e-5
    assert np.max(np.abs(gx - fd_x)) / np.max(np.abs(fd_x)) < 1e-5
    assert np.max(np.abs(gv - fd_v)) / np.max(np.abs(fd_v)) < 1e-5


def test_lipschitz_single_layer():
    spec = MlpSpec((1, 1))
    assert abs(lipschitz_upper_bound(spec, np.array([3.0, 0.5])) - 3.0) < 1e-6


def test_lipschitz_two_layer_product():
    spec = MlpSpec((1, 1, 1))
    p = np.array([2.0, 0.0, 0.5, 0.0])
    assert abs(lipschitz_upper_bound(spec, p) - 1.0) < 1e-6


def test_lipschitz_dominates_sampled_ratios():
    spec = MlpSpec((3, 16, 2))
    p = init_params(spec, np.random.default_rng(13))
    bound = lipschitz_upper_bound(spec, p)
    rng = np.random.default_rng(14)
    X = rng.normal(size=(10_000, 3))
    Y = forward(spec, p, X)[0]
    Xp = X + rng.normal(scale=0.1, size=X.shape)
    Yp = forward(spec, p, Xp)[0]
    num = np.linalg.norm(Yp - Y, axis=1)
    den = np.linalg.norm(Xp - X, axis=1)
    assert bound >= num.max() / den[num.argmax()] - 1e-9
    assert np.all(num <= bound * den + 1e-9)


def test_serialization_roundtrip():
    spec = MlpSpec((2, 7, 3), "relu")
    net = MlpNet(spec, init_params(spec, np.random.default_rng(15)))
    clone = net_from_dict(net_to_dict(net))
    assert clone.spec == net.spec
    np.testing.assert_array_equal(clone.params, net.params)


def test_serialization_version_guard():
    spec = MlpSpec((1, 1))
    d = net_to_dict(MlpNet(spec, np.zeros(2)))
    d["format_version"] = 99
    with pytest.raises(ValueError):
        net_from_dict(d)
