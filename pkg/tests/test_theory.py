import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitflow.data import gen_spectrum_dataset
from unitflow.dynamics import integrate
from unitflow.netcore import UnitLayerNet
from unitflow.theory import (QuadCoords, _blowup_numeric, alignment_residual, conservation, coords_to_u,
                             early_quadratic_stats, escape_time, linear_closed_form, quad_coords,
                             reduced_ode, spectral, t_infinity, unit_order_prediction)


def test_spectral_diagonal():
    dec = spectral(np.diag([2.0, 1.0]))
    np.testing.assert_allclose(dec.s, [2.0, 1.0])
    np.testing.assert_allclose(dec.left, np.eye(2))
    np.testing.assert_allclose(dec.right, np.eye(2))
    assert dec.r == 1


def test_spectral_degenerate_identity():
    dec = spectral(np.eye(2))
    assert dec.multiplicity == 2
    np.testing.assert_allclose(dec.P, 0.5 * np.block([[np.eye(2), np.eye(2)],
                                                      [np.eye(2), np.eye(2)]]))


@pytest.mark.parametrize("kappa, expected", [
    (1.0, [6 / 11, 3 / 11, 2 / 11]),
    (0.0, [1 / 3, 1 / 3, 1 / 3]),
])
def test_spectral_power_law(kappa, expected):
    _, stats = gen_spectrum_dataset(kappa, 3, "linear", 16, seed=0)
    dec = spectral(stats)
    np.testing.assert_allclose(dec.s, expected, atol=1e-14)
    assert dec.multiplicity == (3 if kappa == 0 else 1)


def test_quad_eig_rejects_asymmetric_input():
    M = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        spectral(M, "quad-eig")
    dec = spectral(M, "quad-eig", symmetrize=True)
    np.testing.assert_allclose(dec.s, [2.0, 0.0], atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_projector_is_idempotent(seed):
    S = np.random.default_rng(seed).standard_normal((3, 2))
    P = spectral(S).P
    np.testing.assert_allclose(P @ P, P, atol=1e-12)
    np.testing.assert_allclose(P, P.T, atol=1e-14)


def test_closed_form_identity_at_zero():
    rng = np.random.default_rng(1)
    dec = spectral(rng.standard_normal((2, 3)))
    theta0 = rng.standard_normal((4, 5))
    np.testing.assert_allclose(linear_closed_form(theta0, dec, 0.0), theta0, atol=1e-14)


def test_closed_form_aligned_growth():
    dec = spectral(np.diag([1.5, 0.5]))
    eps = 1e-3
    q1, r1 = dec.left[:, 0], dec.right[:, 0]
    theta0 = eps * np.concatenate([q1, r1])[None]
    out = linear_closed_form(theta0, dec, 2.0)
    np.testing.assert_allclose(out[0], eps * np.exp(3.0) * np.concatenate([q1, r1]), rtol=1e-13)


def test_closed_form_returns_net():
    dec = spectral(np.diag([1.0, 0.5]))
    net = UnitLayerNet("linear-fc", [[0.1, 0.0]], [[0.0, 0.2]])
    assert isinstance(linear_closed_form(net, dec, 1.0), UnitLayerNet)


def test_escape_time_values():
    dec = spectral(np.diag([1.0, 0.5]))
    direction = np.concatenate([dec.left[:, 0], dec.right[:, 0]]) / np.sqrt(2.0)
    assert escape_time(dec, 1e-6 * direction[None]) == pytest.approx(np.log(1e6))
    assert escape_time(dec, direction[None]) == pytest.approx(0.0, abs=1e-14)
    orth = np.array([[0.0, 1.0, 0.0, 0.0]])
    assert escape_time(dec, orth) == np.inf


def test_alignment_residual_examples():
    dec = spectral(np.diag([1.0, 0.5]))
    inside = np.array([1.0, 0.0, 1.0, 0.0])
    outside = np.array([0.0, 1.0, 0.0, 0.0])
    assert alignment_residual(inside, dec) == pytest.approx((np.sqrt(2.0), 0.0))
    assert alignment_residual(outside, dec) == pytest.approx((0.0, 1.0))


def quad_dec(s=(1.0, 0.5, -0.3), seed=0):
    R = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))[0]
    return spectral(R @ np.diag(s) @ R.T, "quad-eig")


def test_quad_coords_examples():
    dec = quad_dec()
    c = quad_coords((1.0, np.sqrt(2.0) * dec.right[:, 0]), dec)
    np.testing.assert_allclose(c.a, [1.0, 0.0, 0.0], atol=1e-14)
    np.testing.assert_array_equal(quad_coords((1.0, np.zeros(3)), dec).a, 0.0)
    u = np.random.default_rng(1).standard_normal(3)
    np.testing.assert_allclose(coords_to_u(quad_coords((0.0, u), dec).a, dec), u, atol=1e-14)


@pytest.mark.parametrize("v, a, expected", [
    (0.5, [0.3, 0.4], 0.0),
    (1.0, [0.0, 0.0], 1.0),
])
def test_conservation_examples(v, a, expected):
    assert conservation(QuadCoords(np.array(a), v)) == pytest.approx(expected)


def test_balanced_conservation_along_rk4():
    dec = quad_dec()
    stats = early_quadratic_stats(dec)
    a0 = np.array([0.03, 0.04, 0.0])
    u0 = coords_to_u(a0, dec)
    net = UnitLayerNet("quadratic-fc", [[0.05]], [u0])
    t_inf = t_infinity(quad_coords(net, dec).unit(0), dec, units="network")
    traj = integrate(net, stats, 0.01, int(0.8 * t_inf / 0.01), record_every=20, scheme="rk4")
    C = [conservation(quad_coords(s, dec).unit(0)) for s in traj.snapshots]
    assert max(abs(c) for c in C) < 1e-9


def test_one_dimensional_reduced_solution():
    dec = spectral(np.array([[1.0]]), "quad-eig")
    coords = QuadCoords(np.array([0.01]), 0.01)
    grid = np.linspace(0.0, 90.0, 10)
    sol = reduced_ode(coords, dec, grid)
    np.testing.assert_allclose(sol.pi, 1.0 / (1.0 - 0.01 * grid), rtol=1e-9)
    assert sol.pi[0] == 1.0


def test_t_infinity_one_dimensional_and_scaling():
    dec = spectral(np.array([[1.0]]), "quad-eig")
    assert t_infinity(QuadCoords(np.array([0.01]), 0.01), dec) == pytest.approx(100.0, rel=1e-10)
    assert t_infinity(QuadCoords(np.array([0.1]), 0.1), dec) == pytest.approx(10.0, rel=1e-10)
    assert t_infinity(QuadCoords(np.array([0.01]), 0.01), dec, units="network") == \
        pytest.approx(50.0)


def test_reduced_ode_blowup_matches_t_infinity():
    dec = quad_dec()
    coords = QuadCoords(np.array([0.02, -0.01, 0.015]), 0.02)
    t_inf = t_infinity(coords, dec)
    grid = np.linspace(0.0, 1.2 * t_inf, 20001)
    sol = reduced_ode(coords, dec, grid, blowup=1e7)
    first = grid[np.argmax(np.nan_to_num(sol.pi, nan=np.inf) > 1e6)]
    assert first == pytest.approx(t_inf, rel=0.01)


def test_reduced_ode_needs_matching_sign():
    dec = spectral(np.diag([1.0, 0.5]), "quad-eig")
    with pytest.raises(ValueError):
        reduced_ode(QuadCoords(np.array([0.1, 0.1]), -0.1), dec, [0.0, 1.0])


def test_numeric_fallback_agrees_with_quadrature():
    # negative v with a negative eigenvalue: regular regime through the last mode
    dec = quad_dec()
    coords = QuadCoords(np.array([0.01, 0.02, 0.03]), -0.03)
    quad_value = t_infinity(coords, dec)
    numeric = _blowup_numeric(coords.v, coords.a, dec.s, 10 * quad_value)
    assert numeric == pytest.approx(quad_value, rel=1e-3)


def test_unit_order_scale_and_ties():
    dec = quad_dec()
    u = coords_to_u(np.array([0.01, 0.005, 0.0]), dec)
    net = UnitLayerNet("quadratic-fc", [[0.01], [0.1]], [u, 10 * u])
    assert unit_order_prediction(net, dec).order[0] == 1
    twin = UnitLayerNet("quadratic-fc", [[0.01], [0.01]], [u, u])
    assert unit_order_prediction(twin, dec).ties == [[0, 1]]
