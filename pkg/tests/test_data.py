import numpy as np
import pytest

from unitflow.config import apply_overrides
from unitflow.data import (InitSpec, NetShape, compute_stats, gen_dataset, gen_spectrum_dataset,
                           init_weights, load_prescribed_stats, power_law_spectrum,
                           read_dataset_csv, read_matrix_csv, substream, write_dataset_csv,
                           write_matrix_csv)
from unitflow.datatypes import Dataset
from unitflow.dynamics import effective_width
from unitflow.kinds import ActivationKind
from unitflow.presets import preset
from unitflow.runner import run


def test_relu_orthogonal_points():
    d = gen_dataset("relu-orthogonal")
    np.testing.assert_array_equal(d.inputs, [[1.0, 0.5], [-1.0, 2.0]])
    np.testing.assert_array_equal(d.targets[:, 0], [1.0, -1.0])
    assert d.P == 2


def test_relu_conv_points():
    d = gen_dataset("relu-conv")
    assert d.P == 4
    np.testing.assert_allclose(d.inputs[2], [0.0, 0.0, 2.0 * np.sqrt(2.0), 0.0])


def test_quadratic_teacher_values():
    d = gen_dataset("quadratic-teacher", P=10, seed=1)
    np.testing.assert_allclose(d.targets[:, 0], np.sum(d.inputs ** 2, axis=1))


def test_quadratic_teacher_cross_moment_structure():
    d = gen_dataset("quadratic-teacher", P=8192, seed=2)
    stats = compute_stats(d, "quadratic-fc")
    # E[(x1^2 + x2^2) x x^T] = 4 I for standard Gaussian inputs
    np.testing.assert_allclose(stats.sigma_yZ, 4.0 * np.eye(2), atol=0.4)


@pytest.mark.parametrize("kind, params", [
    ("linear-fc-teacher", {}),
    ("linear-conv", {}),
    ("icl-regression", {"embed_dim": 2, "context_len": 4}),
    ("quadratic-teacher", {}),
    ("generic-teacher", {"teacher_u": [[1.0, 2.0]]}),
])
def test_generators_are_reproducible(kind, params):
    a = gen_dataset(kind, params, 64, seed=7)
    b = gen_dataset(kind, params, 64, seed=7)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
    c = gen_dataset(kind, params, 64, seed=8)
    assert not np.array_equal(a.inputs, c.inputs)


def test_icl_prompt_hides_query_label():
    d = gen_dataset("icl-regression", {"embed_dim": 2, "context_len": 4}, 8, seed=0)
    assert d.inputs.shape == (8, 3, 5)
    np.testing.assert_array_equal(d.inputs[:, 2, 4], 0.0)


def test_substreams_are_independent_and_stable():
    a = substream(3, "init").standard_normal(4)
    b = substream(3, "data").standard_normal(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, substream(3, "init").standard_normal(4))


@pytest.mark.parametrize("kappa, expected", [
    (1.0, [6 / 11, 3 / 11, 2 / 11]),
    (0.0, [1 / 3, 1 / 3, 1 / 3]),
])
def test_power_law(kappa, expected):
    np.testing.assert_allclose(power_law_spectrum(kappa, 3), expected)


def test_spectrum_dataset_concentrates():
    data, stats = gen_spectrum_dataset(1.0, 3, "linear", 8192, seed=3)
    emp = compute_stats(data, "linear-fc")
    assert np.linalg.norm(emp.sigma_yz - stats.sigma_yz) < 5 / np.sqrt(8192)


def test_spectrum_statistics_rate():
    errs = []
    Ps = [2 ** k for k in range(9, 14)]
    for P in Ps:
        trials = []
        for seed in range(8):
            data, stats = gen_spectrum_dataset(1.0, 3, "linear", P, seed=seed)
            trials.append(np.linalg.norm(compute_stats(data, "linear-fc").sigma_zz
                                         - stats.sigma_zz))
        errs.append(np.mean(trials))
    slope = np.polyfit(np.log(Ps), np.log(errs), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.15)


def test_quadratic_spectrum_has_negative_eigenvalue():
    _, stats = gen_spectrum_dataset(1.0, 3, "quadratic", 2048, seed=4)
    w = np.sort(np.linalg.eigvalsh(stats.sigma_yZ))[::-1]
    s = power_law_spectrum(1.0, 3)
    np.testing.assert_allclose(w, np.concatenate([s, [-0.5 * s[-1]]]), atol=1e-12)


def test_compute_stats_examples():
    stats = compute_stats(Dataset([[1.0]], [[2.0]]), "linear-fc")
    assert stats.sigma_yz[0, 0] == 2.0 and stats.sigma_zz[0, 0] == 1.0
    relu = compute_stats(gen_dataset("relu-orthogonal"), "linear-fc")
    np.testing.assert_allclose(relu.sigma_zz, [[1.0, -0.75], [-0.75, 2.125]])


def test_prescribed_and_empirical_statistics_agree():
    base = apply_overrides(preset("fig2b-linear"), ["sweep=null", "data.kappa=1.0"])
    a = run(base).summary
    b = run(apply_overrides(base, ["data.stats=empirical"])).summary
    scale = a["initial_loss"]
    assert abs(a["final_loss"] - b["final_loss"]) < 0.02 * scale
    assert a["plateau_labels"] == b["plateau_labels"]
    for la, lb in zip(a["plateau_losses"][:-1], b["plateau_losses"][:-1]):
        assert la == pytest.approx(lb, rel=0.02)


def test_isotropic_init_variance():
    shape = NetShape(ActivationKind("linear-fc"), 100, 50, 50)
    net = init_weights(shape, InitSpec(epsilon=1e-6), np.random.default_rng(0))
    assert np.var(net.flat()) == pytest.approx(1e-12, rel=0.2)


def test_low_rank_init_has_rank_one():
    shape = NetShape(ActivationKind("linear-fc"), 20, 3, 3)
    net = init_weights(shape, InitSpec("low-rank", rank=1, sigma=1.0, delta=0.0),
                       np.random.default_rng(1))
    assert effective_width(net, "rank", atol=1e-12) == 1
    with pytest.raises(ValueError):
        init_weights(shape, InitSpec("low-rank", rank=4), np.random.default_rng(1))


def test_init_spec_validation():
    with pytest.raises(ValueError):
        InitSpec("gaussian")
    with pytest.raises(ValueError):
        InitSpec(epsilon=0.0)


def test_dataset_csv_round_trip(tmp_path):
    d = gen_dataset("linear-fc-teacher", P=5, seed=0)
    write_dataset_csv(d, tmp_path / "d.csv")
    back = read_dataset_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.inputs, d.inputs)
    np.testing.assert_array_equal(back.targets, d.targets)
    via = gen_dataset("csv", {"path": str(tmp_path / "d.csv")})
    assert via.P == 5


@pytest.mark.parametrize("text", [
    "a,b\n1,2\n",
    "x0,y0\n1,oops\n",
    "x0,y0\n1\n",
    "",
])
def test_malformed_csv(tmp_path, text):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(ValueError):
        read_dataset_csv(tmp_path / "bad.csv")


def test_prescribed_stats_files(tmp_path):
    write_matrix_csv(np.diag([2.0, 1.0]), tmp_path / "yz.csv")
    write_matrix_csv(np.eye(2), tmp_path / "zz.csv")
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "yz.csv"), np.diag([2.0, 1.0]))
    stats = load_prescribed_stats(tmp_path / "yz.csv", tmp_path / "zz.csv")
    np.testing.assert_allclose(stats.sigma_yy, np.diag([4.0, 1.0]))
    (tmp_path / "bad.csv").write_text("3,3\n1,2\n")
    with pytest.raises(ValueError):
        read_matrix_csv(tmp_path / "bad.csv")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        gen_spectrum_dataset(-1.0, 3)
