"""Unit-level constraints that define invariant manifolds.

A constraint relates the stacked parameter vectors theta_i = [v_i; u_i] of
a few units: two units equal, one unit zero, one unit a multiple of another,
or one unit a linear combination of others.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinds import ActivationKind, UnsupportedKindError

CONSTRAINT_KINDS = ("equal", "zero", "proportional", "lindep")


class NotOnManifoldError(ValueError):
    """Raised when a constraint residual exceeds the allowed tolerance."""


@dataclass(frozen=True)
class ManifoldConstraint:
    """A unit-level constraint.

    kind: 'equal' (theta_i = theta_j), 'zero' (theta_i = 0),
    'proportional' (theta_i = gamma theta_j) or
    'lindep' (theta_i = sum_j coeffs[j] theta_j).  Indices are 0-based.
    """

    kind: str
    i: int
    j: int | None = None
    gamma: float | None = None
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind in ("equal", "proportional"):
            if self.j is None or self.j == self.i:
                raise ValueError(f"{self.kind} constraint needs two distinct units")
        if self.kind == "lindep":
            if not self.coeffs or self.i in self.coeffs:
                raise ValueError("lindep constraint needs coefficients on other units")
            object.__setattr__(self, "coeffs",
                               {int(k): float(v) for k, v in self.coeffs.items()})

    @staticmethod
    def equal(i, j):
        return ManifoldConstraint("equal", i, j)

    @staticmethod
    def zero(i):
        return ManifoldConstraint("zero", i)

    @staticmethod
    def proportional(i, j, gamma=None):
        return ManifoldConstraint("proportional", i, j,
                                  None if gamma is None else float(gamma))

    @staticmethod
    def lindep(i, coeffs):
        return ManifoldConstraint("lindep", i, coeffs=dict(coeffs))

    def units(self) -> list[int]:
        if self.kind == "zero":
            return [self.i]
        if self.kind == "lindep":
            return [self.i, *self.coeffs]
        return [self.i, self.j]


def check_legal(kind: ActivationKind, c: ManifoldConstraint, width: int | None = None):
    """Raise if the constraint is not an invariant manifold for this kind."""
    if c.kind == "zero" and not kind.has_zero_unit:
        raise UnsupportedKindError(f"{kind.describe()} has no zero unit")
    if c.kind == "proportional":
        if kind.homogeneity is None:
            raise UnsupportedKindError(f"{kind.describe()} is not degree-1 homogeneous")
        if kind.homogeneity == "nonneg" and c.gamma is not None and c.gamma < 0:
            raise ValueError("proportional constraint needs gamma >= 0 for this kind")
    if c.kind == "lindep" and not kind.is_linear:
        raise UnsupportedKindError(f"{kind.describe()} is not linear in u")
    if width is not None:
        for idx in c.units():
            if not 0 <= idx < width:
                raise IndexError(f"unit index {idx} outside width {width}")


def stacked_residual(theta: np.ndarray, c: ManifoldConstraint) -> float:
    """Residual of ``c`` on the (H, N_v + N_u) matrix of stacked unit vectors."""
    ti = theta[c.i]
    if c.kind == "equal":
        return float(np.linalg.norm(ti - theta[c.j]))
    if c.kind == "zero":
        return float(np.linalg.norm(ti))
    if c.kind == "proportional":
        gamma = fitted_gamma(ti, theta[c.j]) if c.gamma is None else c.gamma
        return float(np.linalg.norm(ti - gamma * theta[c.j]))
    return float(np.linalg.norm(ti - lindep_combination(theta, c.coeffs)))


def lindep_combination(theta: np.ndarray, coeffs: dict) -> np.ndarray:
    out = np.zeros(theta.shape[1])
    for j, g in coeffs.items():
        out = out + g * theta[j]
    return out


def fitted_gamma(ti: np.ndarray, tj: np.ndarray) -> float:
    """Least-squares gamma for theta_i ~ gamma theta_j."""
    nj = float(tj @ tj)
    if nj == 0.0:
        return 0.0
    return float(ti @ tj) / nj
