import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitflow.constraints import ManifoldConstraint
from unitflow.data import (InitSpec, NetShape, compute_stats, gen_dataset, gen_spectrum_dataset,
                           init_weights)
from unitflow.datatypes import DataStats
from unitflow.kinds import ActivationKind, UnsupportedKindError
from unitflow.landscape import enumerate_linear_saddles, verify_fixed_point
from unitflow.manifold import (drift_test, lindep_least_squares, manifold_fixed_point, project,
                               residual, write_residual_csv)
from unitflow.netcore import UnitLayerNet, forward


def net_from_theta(tag, theta, n_v=1):
    theta = np.asarray(theta, dtype=float)
    return UnitLayerNet(tag, theta[:, :n_v], theta[:, n_v:])


def test_residual_examples():
    net = net_from_theta("relu-fc", [[2.0, 4.0, -2.0], [1.0, 2.0, -1.0]])
    assert residual(net, ManifoldConstraint.proportional(0, 1, 2.0)) == 0.0
    assert residual(net, ManifoldConstraint.proportional(0, 1, 1.0)) == pytest.approx(
        np.linalg.norm([1.0, 2.0, -1.0]))
    same = net_from_theta("tanh-fc", [[1.0, 2.0], [1.0, 2.0]])
    assert residual(same, ManifoldConstraint.equal(0, 1)) == 0.0


def test_lindep_residual_matches_lstsq():
    rng = np.random.default_rng(0)
    net = net_from_theta("linear-fc", rng.standard_normal((3, 4)), 2)
    c = lindep_least_squares(net, 2, [0, 1])
    coef, misfit, *_ = np.linalg.lstsq(net.theta[[0, 1]].T, net.theta[2], rcond=None)
    assert residual(net, c) == pytest.approx(np.sqrt(misfit[0]))


def test_project_equal_means():
    net = net_from_theta("tanh-fc", [[1.0, 0.0], [0.0, 1.0]])
    out = project(net, ManifoldConstraint.equal(0, 1))
    np.testing.assert_allclose(out.theta, [[0.5, 0.5], [0.5, 0.5]])


def test_project_is_identity_on_manifold():
    net = net_from_theta("relu-fc", [[2.0, 4.0], [1.0, 2.0], [0.0, 0.0]])
    for c in (ManifoldConstraint.proportional(0, 1, 2.0), ManifoldConstraint.zero(2)):
        np.testing.assert_array_equal(project(net, c).theta, net.theta)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 3.0), st.integers(0, 10_000))
def test_proportional_projection_is_closest(gamma, seed):
    rng = np.random.default_rng(seed)
    net = net_from_theta("relu-fc", rng.standard_normal((2, 3)))
    c = ManifoldConstraint.proportional(0, 1, gamma)
    out = project(net, c)
    assert residual(out, c) < 1e-12
    dist = np.linalg.norm(out.theta - net.theta)
    for _ in range(50):
        x = rng.standard_normal(3)
        alt = np.vstack([gamma * x, x])
        assert dist <= np.linalg.norm(alt - net.theta) + 1e-12


def test_project_fitted_gamma():
    net = net_from_theta("linear-fc", [[2.0, 4.1], [1.0, 2.0]])
    c = ManifoldConstraint.proportional(0, 1)
    assert residual(project(net, c), c) < 1e-12


@pytest.mark.parametrize("variant, kind, expected_kind", [
    ("generic", "tanh-fc", "equal"),
    ("zero", "quadratic-fc", "zero"),
    ("homogeneous", "relu-fc", "proportional"),
    ("linear", "linear-fc", "lindep"),
])
def test_manifold_fixed_points(variant, kind, expected_kind):
    base = net_from_theta(kind, [[0.8, 0.5, -0.2], [0.3, -0.4, 0.9]])
    net, c = manifold_fixed_point(base, variant, gamma_u=2.0)
    assert c.kind == expected_kind
    assert residual(net, c) == 0.0
    X = np.random.default_rng(1).standard_normal((30, 2))
    np.testing.assert_allclose(forward(net, X), forward(base, X), atol=1e-12)


def test_generic_fixed_point_halves_donor():
    base = net_from_theta("tanh-fc", [[0.8, 0.5]])
    net, c = manifold_fixed_point(base, "generic")
    np.testing.assert_allclose(net.theta, [[0.4, 0.5], [0.4, 0.5]])
    assert c == ManifoldConstraint.equal(1, 0)


def test_manifold_fixed_point_from_saddle_is_critical():
    _, stats = gen_spectrum_dataset(1.0, 3, "linear", 64, seed=2)
    (spec,) = enumerate_linear_saddles(stats, (0,))
    for variant in ("generic", "zero", "homogeneous", "linear"):
        net, _ = manifold_fixed_point(spec.net(), variant)
        assert verify_fixed_point(net, stats, 1e-10)[0]


def test_illegal_constraint_rejected():
    net = net_from_theta("sigmoid-fc", [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(UnsupportedKindError):
        residual(net, ManifoldConstraint.zero(0))
    with pytest.raises(IndexError):
        residual(net, ManifoldConstraint.equal(0, 5))


def test_equal_units_preserved_exactly_by_euler():
    data = gen_dataset("linear-fc-teacher", P=64, seed=3)
    stats = compute_stats(data, "linear-fc")
    rng = np.random.default_rng(3)
    theta = 0.1 * rng.standard_normal((3, 4))
    theta[1] = theta[0]
    net = UnitLayerNet("linear-fc", theta[:, :2], theta[:, 2:])
    worst, rows = drift_test(net, ManifoldConstraint.equal(1, 0), stats, 0.02, 100_000,
                             every=1000)
    assert worst < 1e-12
    assert len(rows) == 101


def test_proportional_relu_drift():
    data = gen_dataset("relu-orthogonal")
    net = net_from_theta("relu-fc", [[0.2, 0.3, 0.1], [0.6, 0.9, 0.3]])
    worst, _ = drift_test(net, ManifoldConstraint.proportional(1, 0, 3.0), data, 0.01, 20_000,
                          every=100, relative=True)
    assert worst < 1e-10


def test_broken_constraint_grows():
    stats = compute_stats(gen_dataset("linear-fc-teacher", P=512, seed=4), "linear-fc")
    rng = np.random.default_rng(4)
    theta = 1e-3 * rng.standard_normal((2, 4))
    theta[1] = theta[0] + 1e-3 * rng.standard_normal(4) * 1e-3
    net = UnitLayerNet("linear-fc", theta[:, :2], theta[:, 2:])
    c = ManifoldConstraint.equal(1, 0)
    start = residual(net, c)
    worst, _ = drift_test(net, c, stats, 0.01, 3000, every=10)
    assert worst > 100 * start


def test_residual_csv(tmp_path):
    write_residual_csv([(0, 0.0, 0.0), (10, 0.1, 1e-17)], tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["step", "time", "residual"]
    assert len(rows) == 3


def test_manifold_adjacent_init_on_manifold():
    c = ManifoldConstraint.equal(0, 2)
    net = init_weights(NetShape(ActivationKind("tanh-fc"), 3, 1, 2),
                       InitSpec("manifold-adjacent", 0.1, constraints=(c,)),
                       np.random.default_rng(5))
    assert residual(net, c) == 0.0


def test_scalar_stats_drift_lindep():
    stats = DataStats("linear", np.diag([1.0, 0.5]), np.eye(2), np.diag([1.0, 0.25]))
    rng = np.random.default_rng(6)
    theta = 0.1 * rng.standard_normal((3, 4))
    theta[2] = 0.5 * theta[0] - 2.0 * theta[1]
    net = UnitLayerNet("linear-fc", theta[:, :2], theta[:, 2:])
    worst, _ = drift_test(net, ManifoldConstraint.lindep(2, {0: 0.5, 1: -2.0}), stats, 0.05,
                          10_000, every=100, relative=True)
    assert worst < 1e-10
