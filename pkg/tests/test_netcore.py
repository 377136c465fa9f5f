import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitflow.constraints import ManifoldConstraint, NotOnManifoldError
from unitflow.data import compute_stats
from unitflow.datatypes import Dataset, DataStats
from unitflow.kinds import ActivationKind, UnsupportedKindError, as_kind
from unitflow.netcore import (FeatureCache, OutMap, UnitLayerNet, forward, grad, grad_fd, loss,
                              reduce_width, value_and_grad)


@pytest.mark.parametrize("kind, V, U, x, expected", [
    ("linear-fc", [[1.4], [0.6]], [[3.0], [3.0]], [1.0], [6.0]),
    ("relu-fc", [[1.0]], [[1.0, 0.0]], [-2.0, 5.0], [0.0]),
    ("quadratic-fc", [[2.0]], [[1.0, 1.0]], [1.0, -1.0], [0.0]),
    ("quadratic-fc", [[2.0]], [[1.0, 2.0]], [1.0, 1.0], [18.0]),
    ("tanh-fc", [[1.0]], [[1.0]], [0.5], [np.tanh(0.5)]),
])
def test_forward_examples(kind, V, U, x, expected):
    net = UnitLayerNet(kind, V, U)
    np.testing.assert_allclose(forward(net, np.array(x)), expected, atol=1e-15)


def test_forward_batch_shape():
    net = UnitLayerNet("relu-fc", np.ones((3, 2)), np.ones((3, 4)))
    assert forward(net, np.zeros((7, 4))).shape == (7, 2)
    assert forward(net, np.zeros(4)).shape == (2,)
    with pytest.raises(ValueError):
        forward(net, np.zeros((7, 3)))


def test_conv_forward_matches_manual_patches():
    rng = np.random.default_rng(0)
    net = UnitLayerNet("conv1d-relu", rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    x = rng.standard_normal(4)
    manual = sum(net.V[i, j] * max(net.U[i] @ x[2 * j:2 * j + 2], 0.0)
                 for i in range(3) for j in range(2))
    assert forward(net, x)[0] == pytest.approx(manual)


def test_attention_prediction_reads_query_label_slot():
    kind = ActivationKind("linear-attention", embed_dim=1, context_len=2, head_rank=1)
    rng = np.random.default_rng(1)
    net = UnitLayerNet(kind, rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))
    X = rng.standard_normal((2, 3))
    X[1, 2] = 0.0
    expected = 0.0
    for i in range(2):
        Vi = net.V[i].reshape(2, 2)
        K, Q = net.U[i, :2].reshape(1, 2), net.U[i, 2:].reshape(1, 2)
        expected += (Vi @ X @ X.T @ K.T @ Q @ X)[1, 2]
    assert forward(net, X)[0] == pytest.approx(expected)


@pytest.mark.parametrize("V, U, X, Y, expected", [
    ([[0.0]], [[0.0]], [[1.0]], [[2.0]], 2.0),
    ([[1.0]], [[2.0]], [[1.0], [2.0]], [[2.0], [4.0]], 0.0),
])
def test_loss_examples(V, U, X, Y, expected):
    net = UnitLayerNet("linear-fc", V, U)
    assert loss(net, Dataset(np.array(X), np.array(Y))) == pytest.approx(expected)


def test_loss_at_rank_one_saddle_leaves_second_mode():
    stats = DataStats("linear", np.diag([2.0, 1.0]), np.eye(2), np.diag([4.0, 1.0]))
    net = UnitLayerNet("linear-fc", [[np.sqrt(2.0), 0.0]], [[np.sqrt(2.0), 0.0]])
    assert loss(net, stats) == pytest.approx(0.5)


def test_loss_on_stats_matches_samples():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((50, 3))
    data = Dataset(X, rng.standard_normal((50, 2)))
    net = UnitLayerNet("linear-fc", rng.standard_normal((4, 2)), rng.standard_normal((4, 3)))
    assert loss(net, compute_stats(data, net.activation)) == pytest.approx(loss(net, data))


def test_linear_gradient_matches_cross_moment_formula():
    rng = np.random.default_rng(3)
    S = rng.standard_normal((2, 3))
    C = np.cov(rng.standard_normal((3, 20)))
    stats = DataStats("linear", S, C, np.eye(2))
    net = UnitLayerNet("linear-fc", rng.standard_normal((4, 2)), rng.standard_normal((4, 3)))
    W = net.V.T @ net.U
    g = grad(net, stats)
    for i in range(4):
        np.testing.assert_allclose(g.dV[i], -(S - W @ C) @ net.U[i], atol=1e-12)


def test_quadratic_gradient_matches_independent_formula():
    X = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, -1.2]])
    y = np.array([1.0, -0.5, 2.0])
    data = Dataset(X, y)
    net = UnitLayerNet("quadratic-fc", [[1.0]], [[1.0, 0.0]])
    z = X @ net.U[0]
    r = net.V[0, 0] * z ** 2 - y
    dv = np.mean(r * z ** 2)
    du = np.mean((r * 2 * net.V[0, 0] * z)[:, None] * X, axis=0)
    g = grad(net, compute_stats(data, net.activation))
    assert g.dV[0, 0] == pytest.approx(dv)
    np.testing.assert_allclose(g.dU[0], du, atol=1e-12)


@pytest.mark.parametrize("tag", ["linear-fc", "quadratic-fc", "conv1d-linear"])
def test_gradient_routes_agree(tag):
    rng = np.random.default_rng(4)
    kind = as_kind(tag)
    n_v, n_u = kind.unit_dims(4, 1)
    net = UnitLayerNet(kind, rng.standard_normal((3, n_v)), rng.standard_normal((3, n_u)))
    data = Dataset(rng.standard_normal((30, 4)), rng.standard_normal((30, 1)))
    g_stats = value_and_grad(net, compute_stats(data, kind))
    g_cache = value_and_grad(net, FeatureCache(data, kind))
    assert g_stats[0] == pytest.approx(g_cache[0])
    np.testing.assert_allclose(g_stats[1].flat(), g_cache[1].flat(), atol=1e-12)


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((10, 2))
    U = np.array([[1.0, 0.3], [-0.4, 1.0]])
    assert np.min(np.abs(X @ U.T)) > 1e-4
    net = UnitLayerNet("relu-fc", rng.standard_normal((2, 1)), U)
    data = Dataset(X, rng.standard_normal(10))
    np.testing.assert_allclose(grad(net, data).flat(), grad_fd(net, data).flat(), rtol=1e-6,
                               atol=1e-9)


def test_zero_network_zero_data_has_zero_gradient():
    net = UnitLayerNet("tanh-fc", np.zeros((2, 1)), np.zeros((2, 3)))
    data = Dataset(np.zeros((4, 3)), np.zeros(4))
    assert grad(net, data).norm() == 0.0


def test_grad_fd_rejects_bad_step():
    net = UnitLayerNet("linear-fc", [[1.0]], [[1.0]])
    with pytest.raises(ValueError):
        grad_fd(net, Dataset([[1.0]], [[1.0]]), h=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_flat_round_trip(H, d, seed):
    rng = np.random.default_rng(seed)
    net = UnitLayerNet("linear-fc", rng.standard_normal((H, 2)), rng.standard_normal((H, d)),
                       OutMap("chain", (rng.standard_normal((3, 2)),)))
    back = net.from_flat(net.flat())
    np.testing.assert_array_equal(back.flat(), net.flat())
    assert back.out_map.kind == "chain"


@pytest.mark.parametrize("pattern, n_v, rows, message", [
    ("skip1", 4, 5, "skip1"),
    ("skip2", 4, 5, "skip2"),
])
def test_skip_shape_rules(pattern, n_v, rows, message):
    with pytest.raises(ValueError, match=message):
        UnitLayerNet("linear-fc", np.ones((3, n_v)), np.ones((3, 2)),
                     OutMap("skip", (np.ones((rows, n_v)), np.ones((1, rows))), pattern))


def test_out_maps_need_linear_kind():
    with pytest.raises(ValueError):
        UnitLayerNet("relu-fc", np.ones((2, 2)), np.ones((2, 2)),
                     OutMap("chain", (np.ones((1, 2)),)))


def test_reduce_width_equal_units_doubles_v():
    rng = np.random.default_rng(6)
    net = UnitLayerNet("tanh-fc", [[0.7], [0.7]], [[1.0, -2.0], [1.0, -2.0]])
    small = reduce_width(net, ManifoldConstraint.equal(1, 0))
    assert small.width == 1
    np.testing.assert_allclose(small.V, [[1.4]])
    X = rng.standard_normal((100, 2))
    np.testing.assert_allclose(forward(small, X), forward(net, X), atol=1e-12)


def test_reduce_width_zero_unit_relu():
    net = UnitLayerNet("relu-fc", [[1.0], [0.0]], [[1.0, 2.0], [0.0, 0.0]])
    small = reduce_width(net, ManifoldConstraint.zero(1))
    X = np.random.default_rng(7).standard_normal((20, 2))
    np.testing.assert_array_equal(forward(small, X), forward(net, X))


def test_reduce_width_lindep_linear():
    rng = np.random.default_rng(8)
    theta = rng.standard_normal((2, 5))
    theta = np.vstack([theta, 0.5 * theta[0] + 0.5 * theta[1]])
    net = UnitLayerNet("linear-fc", theta[:, :2], theta[:, 2:])
    small = reduce_width(net, ManifoldConstraint.lindep(2, {0: 0.5, 1: 0.5}))
    X = rng.standard_normal((100, 3))
    assert small.width == 2
    np.testing.assert_allclose(forward(small, X), forward(net, X), atol=1e-12)


def test_reduce_width_off_manifold_raises():
    net = UnitLayerNet("linear-fc", [[1.0], [2.0]], [[1.0], [1.0]])
    with pytest.raises(NotOnManifoldError):
        reduce_width(net, ManifoldConstraint.equal(0, 1))


def test_reduce_width_illegal_constraint_raises():
    net = UnitLayerNet("tanh-fc", [[1.0], [2.0]], [[1.0], [2.0]])
    with pytest.raises(UnsupportedKindError):
        reduce_width(net, ManifoldConstraint.proportional(1, 0, 2.0))


@pytest.mark.parametrize("bad", [
    dict(tag="poly-fc"),
    dict(tag="poly-fc", degree=1),
    dict(tag="linear-attention", embed_dim=2),
    dict(tag="nonsense"),
])
def test_activation_kind_validation(bad):
    with pytest.raises(ValueError):
        ActivationKind(**bad)


@pytest.mark.parametrize("tag, homogeneity, linear, zero_unit", [
    ("linear-fc", "real", True, True),
    ("conv1d-relu", "nonneg", False, True),
    ("sigmoid-fc", None, False, False),
    ("quadratic-fc", None, False, True),
])
def test_kind_properties(tag, homogeneity, linear, zero_unit):
    k = as_kind(tag)
    assert (k.homogeneity, k.is_linear, k.has_zero_unit) == (homogeneity, linear, zero_unit)
