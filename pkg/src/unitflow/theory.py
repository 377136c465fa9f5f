"""Analytic predictions for the early phase of training.

Linear case: the small-weight dynamics ``v' = S u, u' = S^T v`` (S the
input-output cross moment) are solved exactly through the SVD of S, which
gives escape times and the alignment with the top singular directions.

Quadratic case: in the eigenbasis of the symmetric cross moment, each unit
obeys ``v' = sum_k s_k a_k^2, a_k' = v s_k a_k`` in the reduced time
tau = 2 t (a_k = r_k^T u / sqrt 2).  The flow conserves v^2 - sum a^2 and
collapses to a one-dimensional separable ODE whose blow-up time t_inf
ranks the units.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as spi

from .datatypes import DataStats
from .netcore import UnitLayerNet

DEGENERACY_RTOL = 1e-9
CASES = ("linear-svd", "quad-eig", "lin-fp-eig")


def sign_fix(vecs: np.ndarray) -> np.ndarray:
    """Flip columns so the first component of largest magnitude is positive."""
    vecs = np.array(vecs, dtype=float)
    for k in range(vecs.shape[1]):
        idx = int(np.argmax(np.abs(vecs[:, k])))
        if vecs[idx, k] < 0:
            vecs[:, k] = -vecs[:, k]
    return vecs


def top_multiplicity(s: np.ndarray, rtol: float = DEGENERACY_RTOL) -> int:
    if s.size == 0:
        return 0
    ref = abs(s[0])
    if ref == 0:
        return s.size
    return int(np.sum(np.abs(s[0] - s) <= rtol * ref))


def sorted_eigh(M: np.ndarray):
    """Eigenpairs of a symmetric matrix in descending order with fixed signs."""
    w, vecs = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(w)[::-1]
    return w[order], sign_fix(vecs[:, order])


@dataclass
class SpectralDecomp:
    """Spectral data of the cross moment.

    linear-svd: ``s`` singular values, ``left`` (N_v, D) and ``right``
    (N_u, D) singular vectors, ``P`` the top-r projector on stacked [v; u].
    quad-eig: ``s`` eigenvalues, ``right`` eigenvectors, ``P`` the top-r
    projector on u.  lin-fp-eig: ``s`` eigenvalues and ``left`` eigenvectors
    of S Szz^-1 S^T.
    """

    case: str
    s: np.ndarray
    left: np.ndarray | None
    right: np.ndarray | None
    multiplicity: int
    P: np.ndarray | None = None
    matrix: np.ndarray | None = None

    @property
    def r(self) -> int:
        return self.multiplicity


def _cross_matrix(stats, case):
    if isinstance(stats, DataStats):
        if case == "quad-eig":
            return stats.sigma_yZ
        return stats.sigma_yf
    return np.atleast_2d(np.asarray(stats, dtype=float))


def spectral(stats, case: str = "linear-svd", conv_positions: int | None = None,
             symmetrize: bool = False, sym_tol: float = 1e-10) -> SpectralDecomp:
    """Decompose statistics (DataStats or a raw cross-moment matrix).

    ``conv_positions`` reshapes a scalar-output cross moment of a
    kernel-2 convolution into its (positions, 2) matrix form.
    """
    if case not in CASES:
        raise ValueError(f"unknown spectral case {case!r}")
    if case == "lin-fp-eig":
        if not isinstance(stats, DataStats):
            raise ValueError("lin-fp-eig needs full statistics")
        S, C = stats.sigma_yz, stats.sigma_zz
        M = S @ np.linalg.solve(C, S.T)
        w, E = sorted_eigh(M)
        return SpectralDecomp(case, w, E, None, top_multiplicity(w), None, M)
    S = _cross_matrix(stats, case)
    if case == "linear-svd" and conv_positions:
        S = S.reshape(conv_positions, -1)
    if case == "quad-eig":
        if S.shape[0] != S.shape[1]:
            raise ValueError("quadratic cross moment must be square")
        asym = np.linalg.norm(S - S.T)
        if asym > sym_tol * max(1.0, np.linalg.norm(S)) and not symmetrize:
            raise ValueError(f"cross moment is not symmetric (asymmetry {asym:.2e})")
        w, R = sorted_eigh(S)
        r = top_multiplicity(w)
        P = R[:, :r] @ R[:, :r].T
        return SpectralDecomp(case, w, None, R, r, P, 0.5 * (S + S.T))
    Uq, s, Vt = np.linalg.svd(S, full_matrices=False)
    q = np.array(Uq)
    rr = Vt.T.copy()
    for k in range(s.size):
        idx = int(np.argmax(np.abs(q[:, k])))
        if q[idx, k] < 0:
            q[:, k] = -q[:, k]
            rr[:, k] = -rr[:, k]
    r = top_multiplicity(s)
    W = np.vstack([q[:, :r], rr[:, :r]])
    P = 0.5 * W @ W.T
    return SpectralDecomp(case, s, q, rr, r, P, S)


# ---------------------------------------------------------------------------
# linear case
# ---------------------------------------------------------------------------
def _stacked(init):
    if isinstance(init, UnitLayerNet):
        return init.theta
    return np.atleast_2d(np.asarray(init, dtype=float))


def lin_ode_rhs(theta: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Right-hand side of the small-weight linear dynamics on stacked units."""
    n_v = S.shape[0]
    v, u = theta[:, :n_v], theta[:, n_v:]
    return np.hstack([u @ S.T, v @ S])


def linear_projection_constants(theta0: np.ndarray, decomp: SpectralDecomp):
    """Return (c, b, xi): growing and decaying mode weights and the remainder."""
    q, r = decomp.left, decomp.right
    n_v = q.shape[0]
    v0, u0 = theta0[:, :n_v], theta0[:, n_v:]
    qv = v0 @ q
    ru = u0 @ r
    c = 0.5 * (qv + ru)
    b = 0.5 * (qv - ru)
    xi = theta0 - (np.hstack([(c + b) @ q.T, (c - b) @ r.T]))
    return c, b, xi


def linear_closed_form(init, decomp: SpectralDecomp, t: float):
    """Exact solution of the small-weight linear dynamics at time t.

    theta_i(t) = sum_k c_ki e^{s_k t}[q_k; r_k] + b_ki e^{-s_k t}[q_k; -r_k] + xi_i.
    Returns a network if given one, otherwise the stacked (H, N_v + N_u) array.
    """
    if decomp.case != "linear-svd":
        raise ValueError("closed form needs a linear-svd decomposition")
    theta0 = _stacked(init)
    c, b, xi = linear_projection_constants(theta0, decomp)
    grow = c * np.exp(decomp.s * t)
    decay = b * np.exp(-decomp.s * t)
    q, r = decomp.left, decomp.right
    out = np.hstack([(grow + decay) @ q.T, (grow - decay) @ r.T]) + xi
    if isinstance(init, UnitLayerNet):
        n_v = init.n_v
        return init.with_units(out[:, :n_v], out[:, n_v:])
    return out


def escape_time(decomp: SpectralDecomp, init, threshold: float = 1.0,
                per_unit: bool = False):
    """(1/s_1) ln(threshold / ||P theta(0)||); infinite when the projection vanishes.

    The norm is taken over all units together unless ``per_unit``.
    """
    if decomp.P is None:
        raise ValueError("escape time needs a decomposition with a projector")
    theta0 = _stacked(init)
    proj = theta0 @ decomp.P if decomp.case == "linear-svd" else \
        theta0[:, -decomp.P.shape[0]:] @ decomp.P
    s1 = decomp.s[0]
    if per_unit:
        norms = np.linalg.norm(proj, axis=1)
        with np.errstate(divide="ignore"):
            return np.where(norms > 0, np.log(threshold / np.where(norms > 0, norms, 1)) / s1,
                            np.inf)
    norm = float(np.linalg.norm(proj))
    if norm == 0.0 or s1 <= 0:
        return float("inf")
    return float(np.log(threshold / norm) / s1)


def alignment_residual(theta, decomp: SpectralDecomp):
    """(||P theta||, ||(I - P) theta||), per unit for stacked input."""
    th = np.asarray(_stacked(theta), dtype=float)
    single = np.ndim(theta) == 1
    proj = th @ decomp.P
    a = np.linalg.norm(proj, axis=1)
    b = np.linalg.norm(th - proj, axis=1)
    if single:
        return float(a[0]), float(b[0])
    return a, b


# ---------------------------------------------------------------------------
# quadratic case
# ---------------------------------------------------------------------------
@dataclass
class QuadCoords:
    """Mode coordinates a_k = r_k^T u / sqrt 2 and the output weight v.

    Arrays hold one row per unit.  The flow in these coordinates runs in
    reduced time tau = 2 t.
    """

    a: np.ndarray
    v: np.ndarray
    time_scale: float = 2.0

    @property
    def conserved(self) -> np.ndarray:
        return conservation(self)

    def unit(self, i: int) -> "QuadCoords":
        return QuadCoords(np.atleast_2d(self.a)[i], np.atleast_1d(self.v)[i])


def quad_coords(unit, decomp: SpectralDecomp) -> QuadCoords:
    """Coordinates of a unit (UnitParams / (v, u) pair) or of every unit of a net."""
    if decomp.case != "quad-eig":
        raise ValueError("quadratic coordinates need a quad-eig decomposition")
    R = decomp.right
    if isinstance(unit, UnitLayerNet):
        return QuadCoords(unit.U @ R / np.sqrt(2.0), unit.V[:, 0].copy())
    if hasattr(unit, "u"):
        v, u = unit.v, unit.u
    else:
        v, u = unit
    return QuadCoords(np.asarray(u, dtype=float) @ R / np.sqrt(2.0),
                      float(np.atleast_1d(v)[0]))


def coords_to_u(a, decomp: SpectralDecomp) -> np.ndarray:
    return np.sqrt(2.0) * np.asarray(a) @ decomp.right.T


def conservation(coords: QuadCoords):
    a = np.asarray(coords.a, dtype=float)
    return np.asarray(coords.v) ** 2 - np.sum(a * a, axis=-1)


def early_quadratic_stats(decomp_or_matrix) -> DataStats:
    """Statistics whose gradient flow is exactly the small-weight quadratic dynamics."""
    S = decomp_or_matrix.matrix if isinstance(decomp_or_matrix, SpectralDecomp) \
        else np.asarray(decomp_or_matrix, dtype=float)
    d = S.shape[0]
    return DataStats("poly2", S.reshape(1, -1), np.zeros((d * d, d * d)), np.zeros((1, 1)),
                     "prescribed")


def _select_mode(v0: float, s: np.ndarray) -> int:
    return int(np.argmax(np.sign(v0) * s))


def _radicand(log_pi, v0, a0, s, m):
    expo = np.exp(np.outer(np.atleast_1d(log_pi), 2.0 * s / s[m]))
    return v0 * v0 + (expo - 1.0) @ (a0 * a0)


@dataclass
class ReducedSolution:
    times: np.ndarray
    pi: np.ndarray
    a: np.ndarray
    v: np.ndarray
    mode: int
    units: str


def reduced_ode(coords: QuadCoords, decomp: SpectralDecomp, grid, units: str = "reduced",
                blowup: float = 1e7) -> ReducedSolution:
    """Integrate d pi_m / dtau = sign(v0) s_m pi_m sqrt(radicand) from pi_m = 1.

    pi_m is integrated in log space.  All a_k are rebuilt from
    a_k = a_k(0) pi_m^{s_k / s_m} and v from the conservation law.  Grid
    points after pi_m passes ``blowup`` are NaN.  ``units='network'``
    interprets and reports times in training time (t = tau / 2).
    """
    a0 = np.asarray(coords.a, dtype=float)
    v0 = float(np.atleast_1d(coords.v)[0])
    s = decomp.s
    m = _select_mode(v0, s)
    if np.sign(v0) * s[m] <= 0:
        raise ValueError("no eigenvalue with the sign of v(0); the reduced picture does not apply")
    scale = 2.0 if units == "network" else 1.0
    grid = np.asarray(grid, dtype=float)
    tau = grid * scale
    sign = np.sign(v0)
    warned = [False]

    def rhs(_, y):
        R = _radicand(y[0], v0, a0, s, m)[0]
        if R < 0:
            if not warned[0]:
                warnings.warn("negative radicand clamped at zero", RuntimeWarning)
                warned[0] = True
            R = 0.0
        return [sign * s[m] * np.sqrt(R)]

    def hit(_, y):
        return y[0] - np.log(blowup)

    hit.terminal = True
    sol = spi.solve_ivp(rhs, (0.0, float(tau[-1]) if tau.size else 0.0), [0.0],
                        method="DOP853", rtol=1e-12, atol=1e-14, events=hit,
                        dense_output=True)
    t_end = sol.t[-1]
    log_pi = np.full(tau.shape, np.nan)
    inside = tau <= t_end
    log_pi[inside] = sol.sol(tau[inside])[0]
    pi = np.exp(log_pi)
    a = a0[None, :] * np.exp(np.outer(log_pi, s / s[m]))
    C = v0 * v0 - a0 @ a0
    v = sign * np.sqrt(np.maximum(C + np.sum(a * a, axis=1), 0.0))
    return ReducedSolution(grid, pi, a, v, m, units)


def _blowup_numeric(v0, a0, s, tau_max, limit=1e8):
    """Blow-up time of the full reduced-coordinate flow by direct integration."""
    def rhs(_, y):
        v, a = y[0], y[1:]
        return np.concatenate([[np.sum(s * a * a)], v * s * a])

    def big(_, y):
        return np.max(np.abs(y)) - limit

    big.terminal = True
    sol = spi.solve_ivp(rhs, (0.0, tau_max), np.concatenate([[v0], a0]), method="LSODA",
                        rtol=1e-10, atol=1e-14, events=big)
    if sol.status == 1 and sol.t_events[0].size:
        # remaining time after reaching |y| = limit is O(1 / (s limit))
        return float(sol.t_events[0][0])
    return float("inf")


def t_infinity(coords: QuadCoords, decomp: SpectralDecomp, units: str = "reduced",
               rtol: float = 1e-8) -> float:
    """Blow-up time of a unit's small-weight quadratic dynamics.

    When an eigenvalue with the sign of v(0) exists and the radicand stays
    positive, t_inf = (1/|s_m|) int_1^inf dpi / (pi sqrt(radicand)) is evaluated
    by adaptive quadrature after substituting pi = 1/w.  Otherwise (v must
    change sign first) the coordinate flow is integrated numerically.
    Reduced time by default; ``units='network'`` halves it.
    """
    a0 = np.asarray(coords.a, dtype=float)
    v0 = float(np.atleast_1d(coords.v)[0])
    s = decomp.s
    factor = 0.5 if units == "network" else 1.0
    if v0 == 0.0 and not np.any(a0):
        return float("inf")
    m = _select_mode(v0, s) if v0 != 0 else int(np.argmax(s))
    regular = v0 != 0 and np.sign(v0) * s[m] > 0 and a0[m] != 0
    if regular:
        probe = np.linspace(0.0, 40.0, 400)
        regular = bool(np.all(_radicand(probe, v0, a0, s, m) > 0))
    if regular:
        ratio = 2.0 * s / s[m]

        def g(w):
            if w <= 0.0:
                return 1.0 / abs(a0[m])
            lw = np.log(w)
            R = v0 * v0 + np.sum(a0 * a0 * (np.exp(-ratio * lw) - 1.0))
            return 1.0 / (w * np.sqrt(R))

        with warnings.catch_warnings():
            # roundoff near the integrable endpoint only limits the last digits
            warnings.simplefilter("ignore", spi.IntegrationWarning)
            val, _ = spi.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=min(rtol, 1e-10), limit=400)
        return factor * val / abs(s[m])
    scale = max(abs(v0), float(np.max(np.abs(a0))), 1e-300)
    smax = float(np.max(np.abs(s))) or 1.0
    return factor * _blowup_numeric(v0, a0, s, 1e3 / (smax * scale))


@dataclass
class OrderPrediction:
    order: list
    t_infinity: np.ndarray
    ties: list = field(default_factory=list)


def unit_order_prediction(init, decomp: SpectralDecomp, units: str = "network",
                          tie_rtol: float = 1e-12) -> OrderPrediction:
    """Rank units by t_inf (ascending); groups of equal t_inf are reported as ties."""
    coords = quad_coords(init, decomp) if not isinstance(init, QuadCoords) else init
    A = np.atleast_2d(coords.a)
    V = np.atleast_1d(coords.v)
    if A.shape[0] < 2:
        raise ValueError("ordering needs at least two units")
    tinf = np.array([t_infinity(QuadCoords(A[i], V[i]), decomp, units) for i in range(A.shape[0])])
    order = [int(i) for i in np.argsort(tinf, kind="stable")]
    ties = []
    k = 0
    while k < len(order):
        group = [order[k]]
        while k + 1 < len(order) and _close(tinf[order[k + 1]], tinf[order[k]], tie_rtol):
            k += 1
            group.append(order[k])
        if len(group) > 1:
            ties.append(group)
        k += 1
    return OrderPrediction(order, tinf, ties)


def _close(a, b, rtol):
    if np.isinf(a) and np.isinf(b):
        return True
    return abs(a - b) <= rtol * max(abs(a), abs(b))
