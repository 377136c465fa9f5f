"""Embedded fixed points and the fixed-point lattice of linear networks.

A fixed point of a narrower network is lifted to one more unit by splitting
a unit (generic), adding a silent unit (zero), adding a rescaled copy
(homogeneous kinds) or adding a linear combination (linear kinds).  Every
lift preserves the input-output map and keeps the gradient at zero.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import minimize

from .datatypes import DataStats
from .kinds import UnsupportedKindError
from .netcore import OutMap, UnitLayerNet, grad, loss, value_and_grad
from .theory import sorted_eigh, top_multiplicity

VARIANTS = ("generic", "zero", "homogeneous", "linear")


class IllConditionedError(ValueError):
    """Input second moment too close to singular for the linear lattice."""


@dataclass(frozen=True)
class EmbeddingSpec:
    """Parameters of a one-unit lift.

    generic: v_new = gamma_v v_i, u_new = u_i, v_i <- (1 - gamma_v) v_i.
    zero: v_new = 0, u_new = 0.
    homogeneous: v_new = gamma_v v_i, u_new = gamma_u u_i,
    v_i <- (1 - gamma_u gamma_v) v_i.
    linear: u_new = sum_i gamma_u_list[i] u_i, v_new = sum_i gamma_v_list[i] v_i,
    v_i <- v_i - gamma_u_list[i] sum_j gamma_v_list[j] v_j.
    """

    variant: str
    donor: int = 0
    gamma_v: float = 0.5
    gamma_u: float = 1.0
    gamma_u_list: tuple = ()
    gamma_v_list: tuple = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown embedding variant {self.variant!r}")
        object.__setattr__(self, "gamma_u_list", tuple(float(g) for g in self.gamma_u_list))
        object.__setattr__(self, "gamma_v_list", tuple(float(g) for g in self.gamma_v_list))
        if self.variant == "linear" and len(self.gamma_u_list) != len(self.gamma_v_list):
            raise ValueError("linear lift needs gamma_u_list and gamma_v_list of equal length")


def check_variant(kind, spec: EmbeddingSpec) -> None:
    if spec.variant == "zero" and not kind.has_zero_unit:
        raise UnsupportedKindError(f"{kind.describe()} has no zero unit")
    if spec.variant == "homogeneous":
        if kind.homogeneity is None:
            raise UnsupportedKindError(f"{kind.describe()} is not degree-1 homogeneous")
        if kind.homogeneity == "nonneg" and spec.gamma_u < 0:
            raise ValueError("gamma_u must be non-negative for a positively homogeneous kind")
    if spec.variant == "linear" and not kind.is_linear:
        raise UnsupportedKindError(f"{kind.describe()} is not linear in u")


def embed_unit(base: UnitLayerNet, spec: EmbeddingSpec) -> UnitLayerNet:
    """Append one unit to ``base`` without changing its map; the new unit is last."""
    kind = base.activation
    check_variant(kind, spec)
    if base.out_map.kind == "skip" and base.out_map.pattern != "none":
        raise UnsupportedKindError("the width of a skip network is tied to its skip path")
    V, U = base.V.copy(), base.U.copy()
    H = base.width
    if spec.variant in ("generic", "homogeneous") and not 0 <= spec.donor < H:
        raise IndexError(f"donor {spec.donor} outside width {H}")
    if spec.variant == "generic":
        i = spec.donor
        v_new, u_new = spec.gamma_v * V[i], U[i].copy()
        V[i] = (1.0 - spec.gamma_v) * V[i]
    elif spec.variant == "zero":
        v_new, u_new = np.zeros(base.n_v), np.zeros(base.n_u)
    elif spec.variant == "homogeneous":
        i = spec.donor
        v_new, u_new = spec.gamma_v * V[i], spec.gamma_u * U[i]
        V[i] = (1.0 - spec.gamma_u * spec.gamma_v) * V[i]
    else:
        gu = np.asarray(spec.gamma_u_list, dtype=float)
        gv = np.asarray(spec.gamma_v_list, dtype=float)
        if gu.size != H:
            raise ValueError(f"linear lift needs {H} coefficients, got {gu.size}")
        u_new = gu @ U
        v_new = gv @ V
        V = V - np.outer(gu, v_new)
    return base.with_units(np.vstack([V, v_new]), np.vstack([U, u_new]))


def embed_to_width(base: UnitLayerNet, width: int, spec: EmbeddingSpec | None = None):
    """Apply ``embed_unit`` repeatedly until the net has ``width`` units."""
    if width < base.width:
        raise ValueError("target width is smaller than the base width")
    spec = spec or EmbeddingSpec("zero")
    net = base
    while net.width < width:
        s = spec
        if s.variant == "linear" and len(s.gamma_u_list) != net.width:
            # pad the coefficient lists with zeros for the units added so far
            pad = net.width - len(s.gamma_u_list)
            s = EmbeddingSpec("linear", gamma_u_list=s.gamma_u_list + (0.0,) * pad,
                              gamma_v_list=s.gamma_v_list + (0.0,) * pad)
        net = embed_unit(net, s)
    return net


# ---------------------------------------------------------------------------
# deep linear chains
# ---------------------------------------------------------------------------
def chain_matrices(net: UnitLayerNet) -> list:
    """Layer matrices (W_1, W_2, ..., W_L) of a linear chain, input side first."""
    if net.activation.tag != "linear-fc" or net.out_map.kind not in ("identity", "chain"):
        raise UnsupportedKindError("deep embedding needs a linear-fc chain")
    return [net.U.copy(), net.V.T.copy()] + [m.copy() for m in net.out_map.matrices]


def chain_from_matrices(mats) -> UnitLayerNet:
    mats = [np.asarray(m, dtype=float) for m in mats]
    om = OutMap("chain", tuple(mats[2:])) if len(mats) > 2 else OutMap()
    return UnitLayerNet("linear-fc", mats[1].T, mats[0], om)


def embed_deep(base, target_widths, specs=None) -> UnitLayerNet:
    """Widen every hidden layer of a linear chain to ``target_widths``.

    ``base`` is a linear-fc net (identity or chain out-map) or its list of
    layer matrices.  Hidden layer l sits between W_l and W_{l+1}; its units
    are the rows of W_l (u) paired with the columns of W_{l+1} (v).  Each
    layer is widened by repeated one-unit lifts with ``specs[l]`` (zero lift
    by default), treating the rest of the chain as fixed input/output maps.
    """
    mats = chain_matrices(base) if isinstance(base, UnitLayerNet) else \
        [np.asarray(m, dtype=float) for m in base]
    hidden = [m.shape[0] for m in mats[:-1]]
    target_widths = list(target_widths)
    if len(target_widths) != len(hidden):
        raise ValueError(f"expected {len(hidden)} hidden widths, got {len(target_widths)}")
    if any(t < h for t, h in zip(target_widths, hidden)):
        raise ValueError("target widths must not be smaller than the current widths")
    specs = list(specs) if specs is not None else [None] * len(hidden)
    for layer, width in enumerate(target_widths):
        if width == hidden[layer]:
            continue
        local = UnitLayerNet("linear-fc", mats[layer + 1].T, mats[layer])
        wide = embed_to_width(local, width, specs[layer])
        mats[layer] = wide.U
        mats[layer + 1] = wide.V.T
    return chain_from_matrices(mats)


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------
def verify_fixed_point(net: UnitLayerNet, data, tau: float = 1e-8) -> tuple[bool, float]:
    """(||grad L|| <= tau, ||grad L||) over all parameters."""
    g = grad(net, data)
    norm = g.norm()
    return bool(norm <= tau), float(norm)


# ---------------------------------------------------------------------------
# linear lattice
# ---------------------------------------------------------------------------
@dataclass
class LinearSaddleSpec:
    """Fixed point of a linear net whose map keeps the modes in ``index_set``."""

    index_set: tuple
    W_star: np.ndarray
    modes: np.ndarray
    saddle_loss: float
    V: np.ndarray
    U: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    degenerate: bool = False

    @property
    def rank(self) -> int:
        return len(self.index_set)

    @property
    def bitmask(self) -> int:
        return int(sum(1 << k for k in self.index_set))

    def net(self, width: int | None = None) -> UnitLayerNet:
        """Canonical factorization: one mode per unit, remaining units zero."""
        width = self.rank if width is None else width
        if width < self.rank:
            raise ValueError("width below the saddle rank")
        n_v, n_u = self.V.shape[1], self.U.shape[1]
        V = np.zeros((max(width, 1), n_v))
        U = np.zeros((max(width, 1), n_u))
        V[:self.rank], U[:self.rank] = self.V, self.U
        return UnitLayerNet("linear-fc", V, U)


def _lattice_spectrum(stats: DataStats, cond_max: float):
    S, C = stats.sigma_yz, stats.sigma_zz
    cond = np.linalg.cond(C)
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditionedError(f"input second moment has condition number {cond:.3e}")
    B = np.linalg.solve(C, S.T)  # Szz^-1 Syz^T
    lam, E = sorted_eigh(S @ B)
    return S, C, B, lam, E


def linear_saddle(stats: DataStats, index_set, cond_max: float = 1e12) -> LinearSaddleSpec:
    S, C, B, lam, E = _lattice_spectrum(stats, cond_max)
    return _saddle_from(stats, tuple(sorted(index_set)), S, C, B, lam, E)


def _saddle_from(stats, A, S, C, B, lam, E):
    D = lam.size
    if any(not 0 <= k < D for k in A):
        raise IndexError(f"mode index outside 0..{D - 1}")
    EA = E[:, list(A)]
    W = EA @ EA.T @ B.T
    value = 0.5 * np.trace(stats.sigma_yy) - 0.5 * float(np.sum(lam[list(A)]))
    Vs, Us = [], []
    for k in A:
        w = B @ E[:, k]  # Szz^-1 Syz^T e_k
        alpha = np.sqrt(np.linalg.norm(w))
        if alpha == 0.0:
            Vs.append(np.zeros(E.shape[0]))
            Us.append(np.zeros(B.shape[0]))
        else:
            Vs.append(alpha * E[:, k])
            Us.append(w / alpha)
    n_v, n_u = S.shape
    V = np.array(Vs).reshape(len(A), n_v)
    U = np.array(Us).reshape(len(A), n_u)
    gaps = np.abs(np.diff(lam))
    degenerate = bool(np.any(gaps <= 1e-9 * max(abs(lam[0]), 1e-300)))
    return LinearSaddleSpec(A, W, E, float(value), V, U, lam, degenerate)


def enumerate_linear_saddles(stats: DataStats, r=None, cond_max: float = 1e12) -> list:
    """Fixed points W* = sum_{k in A} e_k e_k^T Syz Szz^-1 of a linear net.

    ``r`` None lists all 2^D index sets, an integer lists those of size r and
    an iterable of indices returns that single set.  Indices are 0-based
    positions in the descending eigenvalue order of Syz Szz^-1 Syz^T.
    """
    S, C, B, lam, E = _lattice_spectrum(stats, cond_max)
    D = lam.size
    if r is None:
        sets = [A for k in range(D + 1) for A in combinations(range(D), k)]
    elif np.isscalar(r):
        if not 0 <= int(r) <= D:
            raise ValueError(f"rank must lie in 0..{D}")
        sets = list(combinations(range(D), int(r)))
    else:
        sets = [tuple(sorted(int(k) for k in r))]
    out = [_saddle_from(stats, A, S, C, B, lam, E) for A in sets]
    if out and out[0].degenerate:
        warnings.warn("near-degenerate eigenvalues: enumeration is not unique", RuntimeWarning)
    return out


def greedy_chain(stats: DataStats, cond_max: float = 1e12) -> list:
    """Saddles visited by adding the largest remaining eigenvalue: {}, {0}, {0,1}, ..."""
    S, C, B, lam, E = _lattice_spectrum(stats, cond_max)
    return [_saddle_from(stats, tuple(range(k)), S, C, B, lam, E) for k in range(lam.size + 1)]


def projected_stats(stats: DataStats, index_set) -> np.ndarray:
    """Cross moment with the learned modes removed: sum_{k not in A} e_k e_k^T Syz."""
    S, C, B, lam, E = _lattice_spectrum(stats, np.inf)
    rest = [k for k in range(lam.size) if k not in set(index_set)]
    Er = E[:, rest]
    return Er @ Er.T @ S


def write_saddle_atlas(specs, path) -> None:
    """CSV rows (index_set bitmask, rank, saddle_loss); bit k marks mode k."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index_set", "rank", "saddle_loss"])
        for s in specs:
            w.writerow([s.bitmask, s.rank, repr(float(s.saddle_loss))])


def rank_one_saddle_loss(stats: DataStats) -> float:
    """Loss of the width-1 linear saddle that keeps the top mode."""
    return linear_saddle(stats, (0,)).saddle_loss


# ---------------------------------------------------------------------------
# measured width-1 saddles for nonlinear kinds
# ---------------------------------------------------------------------------
def reduce_to_width_one(net: UnitLayerNet, atol: float = 0.05, tol: float = 0.05) -> UnitLayerNet:
    """Width-1 net close to a plateau snapshot of effective width 1.

    Linear kinds keep the balanced top singular pair of W = sum v_i u_i^T.
    Positively homogeneous kinds merge the dominant direction cluster into
    one unit with the same map.  Other kinds keep the largest unit.
    """
    kind = net.activation
    if net.out_map.kind == "skip":
        raise ValueError("skip out maps fix the width; no width-1 reduction")
    if kind.is_linear:
        W = net.V.T @ net.U
        Uq, s, Vt = np.linalg.svd(W)
        a = np.sqrt(s[0])
        return net.with_units((a * Uq[:, 0])[None, :], (a * Vt[0])[None, :])
    norms = np.linalg.norm(net.theta, axis=1)
    lead = int(np.argmax(norms))
    if kind.homogeneity == "nonneg":
        d = net.theta[lead] / norms[lead]
        members = [i for i in range(net.width)
                   if norms[i] > 0 and net.theta[i] @ d / norms[i] > 1.0 - tol]
        direction = net.U[lead] / np.linalg.norm(net.U[lead])
        # phi(z; u_i) = |u_i| phi(z; direction) for u_i on the ray
        c = sum(net.V[i] * np.linalg.norm(net.U[i]) for i in members)
        scale = np.sqrt(np.linalg.norm(c)) if np.linalg.norm(c) > 0 else 1.0
        return net.with_units((c / scale)[None, :], (scale * direction)[None, :])
    return net.with_units(net.V[lead:lead + 1], net.U[lead:lead + 1])


def polish(net: UnitLayerNet, data, maxiter: int = 500, gtol: float = 1e-12) -> UnitLayerNet:
    """Local L-BFGS refinement of a near-fixed point (scipy)."""
    def fun(theta):
        value, g = value_and_grad(net.from_flat(theta), data)
        return value, g.flat()

    res = minimize(fun, net.flat(), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-15})
    return net.from_flat(res.x)


def width_one_saddle(snapshot: UnitLayerNet, data, refine: bool = True):
    """(width-1 net, loss) of the fixed point seen during a width-1 plateau."""
    net1 = reduce_to_width_one(snapshot)
    if refine:
        net1 = polish(net1, data)
    return net1, float(loss(net1, data))
