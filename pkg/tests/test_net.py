import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from contraction_ppo.errors import ContractError, StaleTapeError
from contraction_ppo.net import (LipschitzMlp, activate, flatten_grads, lipschitz_bound,
                                 mlp_backward, mlp_forward, mlp_input_jacobian, mlp_jvp,
                                 mlp_jvp_backward, spectral_normalize)

from conftest import central_jacobian, rel_err


def single(W, b, act="identity", budget=math.inf):
    return LipschitzMlp.from_layers([W], [b], [act], [budget])


def random_net(seed=3, sizes=(3, 7, 5, 2), act="tanh"):
    net = LipschitzMlp(sizes, act, seed=seed)
    rng = np.random.default_rng(seed)
    for b in net.biases:
        b += rng.normal(scale=0.3, size=b.shape)
    return net


def test_identity_layer_passes_input_through():
    net = single(np.eye(3), np.zeros(3))
    x = np.array([0.2, -1.0, 4.0])
    assert np.array_equal(mlp_forward(net, x)[0], x)


def test_scalar_tanh_layer_value():
    net = LipschitzMlp.from_layers([[[2.0]], [[1.0]]], [[1.0], [0.0]], ["tanh", "identity"],
                                   [None, None])
    assert net([0.0])[0] == pytest.approx(0.7615941559, abs=1e-10)
    _, tape = mlp_forward(net, [0.0])
    _, gx = mlp_backward(net, tape, np.array([1.0]))
    assert gx[0] == pytest.approx(2 * (1 - math.tanh(1) ** 2), abs=1e-12)
    assert gx[0] == pytest.approx(0.8399486, abs=1e-7)


def test_zero_network_outputs_zero():
    net = LipschitzMlp.from_layers([np.zeros((4, 3)), np.zeros((2, 4))],
                                   [np.zeros(4), np.zeros(2)], ["tanh", "identity"], [1, 1])
    assert not np.any(net(np.array([1.0, -2.0, 3.0])))


def test_linear_layer_input_gradient_is_transpose_product(rng):
    W = rng.normal(size=(3, 4))
    net = single(W, rng.normal(size=3))
    v = rng.normal(size=3)
    _, tape = mlp_forward(net, rng.normal(size=4))
    _, gx = mlp_backward(net, tape, v)
    assert gx == pytest.approx(W.T @ v)
    assert mlp_input_jacobian(net, rng.normal(size=4)) == pytest.approx(W)


@pytest.mark.parametrize("act", ["tanh", "softplus", "elu"])
def test_parameter_gradients_match_differences(act, rng):
    net = random_net(act=act)
    x = rng.normal(size=(4, 3))
    cot = rng.normal(size=(4, 2))
    _, tape = mlp_forward(net, x)
    grads, gx = mlp_backward(net, tape, cot)
    analytic = flatten_grads(grads)
    numeric = []
    for P in net.params():
        for k in range(P.size):
            old = P.flat[k]
            P.flat[k] = old + 1e-6
            up = np.sum(net(x) * cot)
            P.flat[k] = old - 1e-6
            dn = np.sum(net(x) * cot)
            P.flat[k] = old
            numeric.append((up - dn) / 2e-6)
    assert rel_err(analytic, numeric) <= 1e-5
    num_x = central_jacobian(lambda z: np.sum(net(z) * cot), x)
    assert rel_err(gx.ravel(), num_x.ravel()) <= 1e-5


def test_input_jacobian_matches_differences(rng):
    net = random_net()
    for x in rng.normal(size=(5, 3)):
        assert rel_err(mlp_input_jacobian(net, x), central_jacobian(net, x)) <= 1e-5
    batch = rng.normal(size=(5, 3))
    J = mlp_input_jacobian(net, batch)
    assert J.shape == (5, 2, 3)
    assert J[2] == pytest.approx(mlp_input_jacobian(net, batch[2]))


def test_identity_net_jacobian():
    net = single(np.eye(2), np.zeros(2))
    assert np.array_equal(mlp_input_jacobian(net, [0.3, 0.1]), np.eye(2))


def test_jvp_matches_jacobian_product(rng):
    net = random_net()
    x, v = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    out, tan, _ = mlp_jvp(net, x, v)
    assert out == pytest.approx(net(x))
    assert tan == pytest.approx(np.einsum("bjk,bk->bj", mlp_input_jacobian(net, x), v))


@pytest.mark.parametrize("act", ["tanh", "softplus", "elu"])
def test_jvp_backward_matches_differences(act, rng):
    net = random_net(act=act, seed=11)
    x, v = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    go, gt = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

    def scalar():
        o, t, _ = mlp_jvp(net, x, v)
        return np.sum(o * go) + np.sum(t * gt)

    _, _, tape = mlp_jvp(net, x, v)
    grads, gx, gv = mlp_jvp_backward(net, tape, go, gt)
    numeric = []
    for P in net.params():
        for k in range(P.size):
            old = P.flat[k]
            P.flat[k] = old + 1e-6
            up = scalar()
            P.flat[k] = old - 1e-6
            dn = scalar()
            P.flat[k] = old
            numeric.append((up - dn) / 2e-6)
    assert rel_err(flatten_grads(grads), numeric) <= 1e-5

    def in_x(z):
        o, t, _ = mlp_jvp(net, z, v)
        return np.sum(o * go) + np.sum(t * gt)

    def in_v(w):
        o, t, _ = mlp_jvp(net, x, w)
        return np.sum(o * go) + np.sum(t * gt)

    assert rel_err(gx.ravel(), central_jacobian(in_x, x).ravel()) <= 1e-5
    assert rel_err(gv.ravel(), central_jacobian(in_v, v).ravel()) <= 1e-5


def test_tape_single_use_and_staleness():
    net = random_net()
    _, tape = mlp_forward(net, np.zeros(3))
    mlp_backward(net, tape, np.ones(2))
    with pytest.raises(StaleTapeError):
        mlp_backward(net, tape, np.ones(2))
    _, tape = mlp_forward(net, np.zeros(3))
    net.touch()
    with pytest.raises(StaleTapeError):
        mlp_backward(net, tape, np.ones(2))
    _, _, tape = mlp_jvp(net, np.zeros(3), np.ones(3))
    with pytest.raises(StaleTapeError):
        mlp_backward(net, tape, np.ones(2))


def test_shape_errors():
    net = random_net()
    with pytest.raises(ContractError):
        net(np.zeros(4))
    _, tape = mlp_forward(net, np.zeros(3))
    with pytest.raises(ContractError):
        mlp_backward(net, tape, np.ones(3))


@pytest.mark.parametrize("budget,expected", [(1.0, [0.75, 1.0]), (2.0, [1.5, 2.0])])
def test_spectral_normalize_diagonal(budget, expected):
    net = single(np.diag([3.0, 4.0]), np.zeros(2), budget=budget)
    sig = spectral_normalize(net)
    assert np.diag(net.weights[0]) == pytest.approx(expected, rel=1e-12)
    assert sig[0] == pytest.approx(budget, rel=1e-12)


def test_spectral_normalize_leaves_compliant_layer():
    W = np.array([[0.3, 0.1], [0.0, 0.2]])
    net = single(W.copy(), np.zeros(2), budget=1.0)
    v0 = net.version
    spectral_normalize(net)
    assert np.array_equal(net.weights[0], W)
    assert net.version == v0


@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 5), st.integers(0, 10_000))
def test_spectral_normalize_enforces_budget(rows, cols, budget, seed):
    W = np.random.default_rng(seed).normal(scale=3, size=(rows, cols))
    net = single(W, np.zeros(rows), budget=budget)
    spectral_normalize(net)
    assert np.linalg.norm(net.weights[0], 2) <= budget + 1e-6


def test_lipschitz_bound_cases():
    assert lipschitz_bound(single(np.diag([0.75, 0.5]), np.zeros(2))) == pytest.approx(0.75)
    two = LipschitzMlp.from_layers([np.eye(2), np.eye(2)], [np.zeros(2)] * 2,
                                   ["tanh", "identity"], [1, 1])
    assert lipschitz_bound(two) == pytest.approx(1.0)
    three = LipschitzMlp((3, 16, 16, 2), "tanh", budgets=(2, 2, 0.5), seed=0, gain=50.0)
    assert lipschitz_bound(three) == pytest.approx(2.0, rel=1e-9)


def test_lipschitz_bound_dominates_jacobian_norm(rng):
    net = LipschitzMlp((3, 16, 16, 2), "tanh", budgets=(1.5, 1.0, 0.7), seed=5, gain=4.0)
    L = lipschitz_bound(net)
    J = mlp_input_jacobian(net, rng.normal(scale=2, size=(200, 3)))
    assert np.max(np.linalg.norm(J, 2, axis=(1, 2))) <= L + 1e-9


@given(st.sampled_from(["tanh", "softplus", "elu"]), st.floats(-20, 20))
def test_activation_derivatives(name, z):
    h = 1e-5
    a, d1, d2 = activate(name, np.array([z]))
    if name == "elu" and abs(z) < 2 * h:
        return
    up, dn = activate(name, np.array([z + h])), activate(name, np.array([z - h]))
    assert d1[0] == pytest.approx((up[0][0] - dn[0][0]) / (2 * h), abs=1e-6)
    assert d2[0] == pytest.approx((up[1][0] - dn[1][0]) / (2 * h), abs=1e-5)


def test_copy_is_independent():
    net = random_net()
    twin = net.copy()
    twin.weights[0][0, 0] += 1
    assert net.weights[0][0, 0] != twin.weights[0][0, 0]
