"""Invariant manifolds of unit-layer networks.

Equal units stay equal, zero units stay zero, proportional units (homogeneous
kinds) stay proportional and linearly dependent units (linear kinds) stay
dependent under gradient flow and under plain gradient descent.
"""
from __future__ import annotations

import csv

import numpy as np

from .constraints import (ManifoldConstraint, check_legal, fitted_gamma,
                          lindep_combination, stacked_residual)
from .dynamics import integrate
from .landscape import EmbeddingSpec, check_variant, embed_unit
from .netcore import UnitLayerNet
from .kinds import UnsupportedKindError


def residual(net: UnitLayerNet, c: ManifoldConstraint) -> float:
    """Distance of the involved units from the constraint set (0 when satisfied)."""
    check_legal(net.activation, c, net.width)
    return stacked_residual(net.theta, c)


def lindep_least_squares(net: UnitLayerNet, i: int, others) -> ManifoldConstraint:
    """Lindep constraint with least-squares coefficients of theta_i on the others."""
    others = [int(j) for j in others]
    A = net.theta[others].T
    coef, *_ = np.linalg.lstsq(A, net.theta[i], rcond=None)
    return ManifoldConstraint.lindep(i, dict(zip(others, coef)))


def _set_units(net, theta):
    n_v = net.n_v
    return net.with_units(theta[:, :n_v], theta[:, n_v:])


def project(net: UnitLayerNet, c: ManifoldConstraint) -> UnitLayerNet:
    """Smallest change of the involved units that satisfies ``c`` exactly.

    equal: both units replaced by their mean.  zero: unit zeroed.
    proportional: the pair (theta_i, theta_j) is replaced by its closest
    point on {theta_i = gamma theta_j} (gamma fitted when None).  lindep:
    theta_i replaced by the combination of the other units.
    """
    check_legal(net.activation, c, net.width)
    theta = net.theta.copy()
    if c.kind == "equal":
        m = 0.5 * (theta[c.i] + theta[c.j])
        theta[c.i] = m
        theta[c.j] = m
    elif c.kind == "zero":
        theta[c.i] = 0.0
    elif c.kind == "proportional":
        ti, tj = theta[c.i], theta[c.j]
        gamma = c.gamma
        if gamma is None:
            # best ray pair: top singular direction of [theta_j, theta_i]
            M = np.vstack([tj, ti])
            Uq, s, Vt = np.linalg.svd(M, full_matrices=False)
            a = Uq[:, 0]
            if abs(a[0]) < 1e-300:
                theta[c.j] = 0.0
            else:
                gamma = a[1] / a[0]
                if net.activation.homogeneity == "nonneg" and gamma < 0:
                    gamma = 0.0
        if gamma is not None:
            # minimise |x - tj|^2 + |gamma x - ti|^2 over x
            x = (tj + gamma * ti) / (1.0 + gamma * gamma)
            theta[c.j] = x
            theta[c.i] = gamma * x
        if c.gamma is None and gamma is not None:
            theta[c.i] = fitted_gamma(theta[c.i], theta[c.j]) * theta[c.j]
    else:
        theta[c.i] = lindep_combination(theta, c.coeffs)
    return _set_units(net, theta)


def manifold_fixed_point(base: UnitLayerNet, variant: str, donor: int = 0,
                         gamma_u: float = 2.0, gamma_u_list=None):
    """Lift a fixed point to one more unit so that it lies on an invariant manifold.

    generic (gamma_v = 1/2): the new unit equals the halved donor.
    zero: the new unit is zero.
    homogeneous (gamma_v = gamma_u / (1 + gamma_u^2)): theta_new = gamma_u theta_donor.
    linear (gamma_v_i = gamma_u_i / (1 + sum gamma_u^2)): theta_new = sum gamma_u_i theta_i.
    The new unit is written from the lifted units themselves so that the
    returned constraint holds with residual exactly 0.  Returns (net, constraint).
    """
    H = base.width
    new = H
    if variant == "generic":
        spec = EmbeddingSpec("generic", donor=donor, gamma_v=0.5)
    elif variant == "zero":
        spec = EmbeddingSpec("zero")
    elif variant == "homogeneous":
        g = float(gamma_u)
        spec = EmbeddingSpec("homogeneous", donor=donor, gamma_u=g, gamma_v=g / (1.0 + g * g))
    elif variant == "linear":
        gu = np.asarray(gamma_u_list if gamma_u_list is not None else np.ones(H), dtype=float)
        gv = gu / (1.0 + float(gu @ gu))
        spec = EmbeddingSpec("linear", gamma_u_list=tuple(gu), gamma_v_list=tuple(gv))
    else:
        raise UnsupportedKindError(f"unknown manifold variant {variant!r}")
    check_variant(base.activation, spec)
    net = embed_unit(base, spec)
    theta = net.theta.copy()
    if variant == "generic":
        theta[new] = theta[donor]
        c = ManifoldConstraint.equal(new, donor)
    elif variant == "zero":
        theta[new] = 0.0
        c = ManifoldConstraint.zero(new)
    elif variant == "homogeneous":
        theta[new] = spec.gamma_u * theta[donor]
        c = ManifoldConstraint.proportional(new, donor, spec.gamma_u)
    else:
        coeffs = {j: g for j, g in enumerate(spec.gamma_u_list)}
        theta[new] = lindep_combination(theta, coeffs)
        c = ManifoldConstraint.lindep(new, coeffs)
    return _set_units(net, theta), c


def drift_test(net: UnitLayerNet, constraint: ManifoldConstraint, data, lr: float,
               n_steps: int, scheme: str = "euler", every: int = 1, relative: bool = False):
    """Integrate from ``net`` and track the constraint residual.

    Returns (max residual, residual series as (step, time, residual) rows).
    With ``relative`` each residual is divided by the current ||theta||.
    """
    rows = []
    check_legal(net.activation, constraint, net.width)

    def value(step, cur):
        r = stacked_residual(cur.theta, constraint)
        if relative:
            r = r / max(np.linalg.norm(cur.theta), 1e-300)
        rows.append((step, step * lr, r))

    value(0, net)

    def cb(step, cur):
        if step % every == 0:
            value(step, cur)

    integrate(net, data, lr, n_steps, record_every=max(n_steps, 1), scheme=scheme,
              callback=cb)
    return max(r for _, _, r in rows), rows


def write_residual_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "residual"])
        for s, t, r in rows:
            w.writerow([int(s), repr(float(t)), repr(float(r))])
