"""Unit-layer networks: forward map, squared loss and analytic gradients.

A network is ``f(x) = g_out(sum_i phi(g_in(x); u_i) v_i)``.  Unit parameters
are stored as two arrays, ``V`` of shape (H, N_v) and ``U`` of shape
(H, N_u), so unit i is ``theta_i = [V[i]; U[i]]``.

Two gradient routes exist.  Kinds whose output is linear in a fixed feature
map of the input ("moment form": linear, conv-linear, polynomial, linear
attention) are differentiated through the effective feature-space map ``M``;
this also lets dynamics run on second-moment statistics directly.  The other
kinds use per-sample backpropagation.  ``loss`` always evaluates the literal
forward map, so ``grad_fd`` is an independent check of both routes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .constraints import (ManifoldConstraint, NotOnManifoldError, check_legal,
                          stacked_residual)
from .datatypes import Dataset, DataStats
from .kinds import ActivationKind, UnsupportedKindError, as_kind

OUT_MAPS = ("identity", "chain", "skip")
SKIP_PATTERNS = ("none", "skip1", "skip2")


@dataclass(frozen=True)
class UnitParams:
    v: np.ndarray
    u: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.v, self.u])


@dataclass(frozen=True, eq=False)
class OutMap:
    """Processing after the unit layer.

    identity: f = zeta.
    chain: f = W_k ... W_1 zeta for ``matrices = (W_1, ..., W_k)``.
    skip: ``matrices = (W3, W4)`` with f = W4 W3 zeta (none),
    W4 W3 (zeta + h) (skip1) or W4 (W3 zeta + h) (skip2), where h = U x is
    the first-layer activation.
    """

    kind: str = "identity"
    matrices: tuple = ()
    pattern: str = "none"

    def __post_init__(self):
        if self.kind not in OUT_MAPS:
            raise ValueError(f"unknown out_map {self.kind!r}")
        mats = tuple(np.asarray(m, dtype=float) for m in self.matrices)
        object.__setattr__(self, "matrices", mats)
        if self.kind == "identity" and mats:
            raise ValueError("identity out_map takes no matrices")
        if self.kind == "chain" and not mats:
            raise ValueError("chain out_map needs at least one matrix")
        if self.kind == "skip":
            if len(mats) != 2:
                raise ValueError("skip out_map needs matrices (W3, W4)")
            if self.pattern not in SKIP_PATTERNS:
                raise ValueError(f"unknown skip pattern {self.pattern!r}")

    def with_matrices(self, mats):
        return OutMap(self.kind, tuple(mats), self.pattern)


@dataclass(frozen=True, eq=False)
class UnitLayerNet:
    activation: ActivationKind
    V: np.ndarray
    U: np.ndarray
    out_map: OutMap = field(default_factory=OutMap)

    def __post_init__(self):
        kind = as_kind(self.activation)
        object.__setattr__(self, "activation", kind)
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if V.shape[0] != U.shape[0]:
            raise ValueError("V and U must have one row per unit")
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "U", U)
        self._check_shapes()

    def _check_shapes(self):
        kind, H, n_v, n_u = self.activation, self.width, self.n_v, self.n_u
        if kind.family == "conv" and n_u != kind.kernel_size:
            raise ValueError("conv units have u of length kernel_size")
        if kind.family == "attention":
            exp_v, exp_u = kind.unit_dims(0)
            if (n_v, n_u) != (exp_v, exp_u):
                raise ValueError(f"attention units need (N_v, N_u) = {(exp_v, exp_u)}")
        om = self.out_map
        if om.kind != "identity" and kind.tag != "linear-fc":
            raise ValueError("chain/skip out maps apply to linear-fc only")
        if om.kind == "chain":
            rows = n_v
            for m in om.matrices:
                if m.ndim != 2 or m.shape[1] != rows:
                    raise ValueError("chain matrices do not conform")
                rows = m.shape[0]
        if om.kind == "skip":
            W3, W4 = om.matrices
            if W3.shape[1] != n_v:
                raise ValueError("W3 must have N_v columns")
            if om.pattern == "skip1" and n_v != H:
                raise ValueError("skip1 needs N_v equal to the width")
            if om.pattern == "skip2" and W3.shape[0] != H:
                raise ValueError("skip2 needs W3 with one row per unit")
            if W4.shape[1] != W3.shape[0]:
                raise ValueError("W4 does not conform with W3")

    # -- shape information ---------------------------------------------
    @property
    def width(self) -> int:
        return self.V.shape[0]

    @property
    def n_v(self) -> int:
        return self.V.shape[1]

    @property
    def n_u(self) -> int:
        return self.U.shape[1]

    @property
    def input_shape(self) -> tuple:
        kind = self.activation
        if kind.family == "conv":
            return (kind.stride * self.n_v,)
        if kind.family == "attention":
            return (kind.embed_dim + 1, kind.context_len + 1)
        return (self.n_u,)

    @property
    def output_dim(self) -> int:
        if self.activation.family != "fc":
            return 1
        om = self.out_map
        if om.kind == "identity":
            return self.n_v
        return om.matrices[-1].shape[0]

    @property
    def units(self) -> list[UnitParams]:
        return [UnitParams(self.V[i].copy(), self.U[i].copy()) for i in range(self.width)]

    @property
    def theta(self) -> np.ndarray:
        """Stacked unit vectors, shape (H, N_v + N_u)."""
        return np.hstack([self.V, self.U])

    @property
    def n_params(self) -> int:
        return self.V.size + self.U.size + sum(m.size for m in self.out_map.matrices)

    # -- construction helpers -------------------------------------------
    def replace(self, V=None, U=None, matrices=None) -> "UnitLayerNet":
        om = self.out_map if matrices is None else self.out_map.with_matrices(matrices)
        return UnitLayerNet(self.activation,
                            self.V if V is None else V,
                            self.U if U is None else U, om)

    def flat(self) -> np.ndarray:
        parts = [self.V.ravel(), self.U.ravel()]
        parts += [m.ravel() for m in self.out_map.matrices]
        return np.concatenate(parts)

    def from_flat(self, vec) -> "UnitLayerNet":
        V, U, mats = _split_flat(self, np.asarray(vec, dtype=float))
        return self.replace(V, U, mats if mats else None)

    @staticmethod
    def from_units(activation, units, out_map=None) -> "UnitLayerNet":
        V = np.array([np.atleast_1d(np.asarray(un.v if isinstance(un, UnitParams) else un[0],
                                               dtype=float)) for un in units])
        U = np.array([np.atleast_1d(np.asarray(un.u if isinstance(un, UnitParams) else un[1],
                                               dtype=float)) for un in units])
        return UnitLayerNet(as_kind(activation), V, U, out_map or OutMap())

    def with_units(self, V, U) -> "UnitLayerNet":
        return UnitLayerNet(self.activation, V, U, self.out_map)


@dataclass(frozen=True, eq=False)
class Gradient:
    """dL/dtheta with the same layout as the network."""

    dV: np.ndarray
    dU: np.ndarray
    dmats: tuple = ()

    @property
    def units(self) -> list[UnitParams]:
        return [UnitParams(self.dV[i], self.dU[i]) for i in range(self.dV.shape[0])]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.dV.ravel(), self.dU.ravel()]
                              + [m.ravel() for m in self.dmats])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


def _split_flat(net: UnitLayerNet, vec: np.ndarray):
    if vec.size != net.n_params:
        raise ValueError("flat parameter vector has the wrong length")
    a = net.V.size
    b = a + net.U.size
    V = vec[:a].reshape(net.V.shape)
    U = vec[a:b].reshape(net.U.shape)
    mats = []
    for m in net.out_map.matrices:
        mats.append(vec[b:b + m.size].reshape(m.shape))
        b += m.size
    return V, U, mats


# ---------------------------------------------------------------------------
# literal forward map
# ---------------------------------------------------------------------------
def _as_batch(net: UnitLayerNet, x):
    x = np.asarray(x, dtype=float)
    shape = net.input_shape
    if x.shape == shape:
        return x[None], True
    if net.activation.family == "fc" and shape == (1,) and x.ndim == 1:
        return x[:, None], False
    if x.shape[1:] == shape:
        return x, False
    raise ValueError(f"input of shape {x.shape} does not match the network input {shape}")


def _apply_out_map(net: UnitLayerNet, zeta, h):
    om = net.out_map
    if om.kind == "identity":
        return zeta
    if om.kind == "chain":
        for m in om.matrices:
            zeta = zeta @ m.T
        return zeta
    W3, W4 = om.matrices
    if om.pattern == "none":
        return zeta @ W3.T @ W4.T
    if om.pattern == "skip1":
        return (zeta + h) @ W3.T @ W4.T
    return (zeta @ W3.T + h) @ W4.T


def attention_output(net: UnitLayerNet, X) -> np.ndarray:
    """Full token output ``X + sum_i V_i X X^T K_i^T Q_i X`` for one token matrix."""
    kind = net.activation
    d1, R = kind.embed_dim + 1, kind.head_rank
    X = np.asarray(X, dtype=float)
    out = X.copy()
    for i in range(net.width):
        Vi = net.V[i].reshape(d1, d1)
        Ki = net.U[i, :R * d1].reshape(R, d1)
        Qi = net.U[i, R * d1:].reshape(R, d1)
        out = out + kind.attn_scale * (Vi @ X @ X.T @ Ki.T @ Qi @ X)
    return out


def forward(net: UnitLayerNet, x) -> np.ndarray:
    """Network output.

    A single input gives shape (n_out,); a batch of P inputs gives
    (P, n_out).  Attention reads the prediction from the label slot of the
    query token (last row, last column) of the summed head outputs; the
    residual input at that slot is left out (it is zero in in-context
    prompts, where the query label is hidden).
    """
    X, single = _as_batch(net, x)
    kind = net.activation
    if kind.family == "fc":
        z = X @ net.U.T
        zeta = kind.sigma(z) @ net.V
        out = _apply_out_map(net, zeta, z)
    elif kind.family == "conv":
        m = net.n_v
        patches = X.reshape(X.shape[0], m, kind.kernel_size)
        z = np.einsum("pjk,hk->pjh", patches, net.U)
        out = np.einsum("pjh,hj->p", kind.sigma(z), net.V)[:, None]
    else:
        d, n = kind.embed_dim, kind.context_len
        out = np.array([[attention_output(net, Xm)[d, n] - Xm[d, n]] for Xm in X])
    return out[0] if single else out


def loss(net: UnitLayerNet, data) -> float:
    """Mean over samples of 1/2 ||y - f(x)||^2 (or its moment form on stats)."""
    if isinstance(data, DataStats):
        return float(_moment_value(net, data))
    if data.P == 0:
        raise ValueError("dataset is empty")
    resid = data.targets - forward(net, data.inputs)
    return float(0.5 * np.mean(np.sum(resid * resid, axis=1)))


# ---------------------------------------------------------------------------
# moment-form kinds
# ---------------------------------------------------------------------------
def feature_name(kind: ActivationKind) -> str:
    kind = as_kind(kind)
    if not kind.moment_form:
        raise UnsupportedKindError(f"{kind.describe()} has no moment form")
    if kind.is_linear:
        return "linear"
    if kind.family == "attention":
        return "attention"
    return f"poly{kind.poly_degree}"


def features(kind: ActivationKind, X) -> np.ndarray:
    """Feature map so that the output is ``M @ features(x)`` for moment-form kinds."""
    name = feature_name(kind)
    X = np.asarray(X, dtype=float)
    P = X.shape[0]
    if name == "linear":
        return X.reshape(P, -1)
    if name == "attention":
        A = np.einsum("pan,pbn->pab", X, X)
        xq = X[:, :, -1]
        return kind.attn_scale * np.einsum("pab,pc->pabc", A, xq).reshape(P, -1)
    p = int(name[4:])
    F = X
    for _ in range(p - 1):
        F = (F[:, :, None] * X[:, None, :]).reshape(P, -1)
    return F


def _tensor_power(U, p):
    out = U
    H = U.shape[0]
    for _ in range(p - 1):
        out = (out[:, :, None] * U[:, None, :]).reshape(H, -1)
    return out


def _attention_parts(net):
    kind = net.activation
    d1, R = kind.embed_dim + 1, kind.head_rank
    H = net.width
    vlast = net.V.reshape(H, d1, d1)[:, d1 - 1, :]
    K = net.U[:, :R * d1].reshape(H, R, d1)
    Q = net.U[:, R * d1:].reshape(H, R, d1)
    return vlast, K, Q


def _chain_prefix(mats):
    """Products B_l = W_k ... W_{l+1} (B_k = I) and the full product."""
    out_dim = mats[-1].shape[0]
    suffix = [None] * len(mats)
    acc = np.eye(out_dim)
    for idx in range(len(mats) - 1, -1, -1):
        suffix[idx] = acc
        acc = acc @ mats[idx]
    return suffix, acc


def moment(net: UnitLayerNet) -> np.ndarray:
    """Effective map M with f(x) = M @ features(x), shape (n_out, F)."""
    kind = net.activation
    V, U = net.V, net.U
    if kind.tag == "linear-fc":
        om = net.out_map
        if om.kind == "identity":
            return V.T @ U
        if om.kind == "chain":
            return _chain_prefix(om.matrices)[1] @ (V.T @ U)
        W3, W4 = om.matrices
        if om.pattern == "none":
            return W4 @ W3 @ V.T @ U
        if om.pattern == "skip1":
            return W4 @ W3 @ (V.T + np.eye(net.n_v)) @ U
        return W4 @ (W3 @ V.T + np.eye(W3.shape[0])) @ U
    if kind.tag == "conv1d-linear":
        return (V.T @ U).reshape(1, -1)
    if kind.family == "attention":
        vlast, K, Q = _attention_parts(net)
        return np.einsum("ha,hrb,hrc->abc", vlast, K, Q).reshape(1, -1)
    if kind.poly_degree is not None:
        return V.T @ _tensor_power(U, kind.poly_degree)
    raise UnsupportedKindError(f"{kind.describe()} has no moment form")


def _symmetrize(T, p, d):
    T = T.reshape((d,) * p)
    acc = np.zeros_like(T)
    perms = list(permutations(range(p)))
    for perm in perms:
        acc += np.transpose(T, perm)
    return acc / len(perms)


def moment_backward(net: UnitLayerNet, dM: np.ndarray) -> Gradient:
    """Pull dL/dM back to the network parameters."""
    kind = net.activation
    V, U = net.V, net.U
    if kind.tag == "linear-fc":
        om = net.out_map
        if om.kind == "identity":
            return Gradient(U @ dM.T, V @ dM)
        if om.kind == "chain":
            mats = om.matrices
            suffix, B = _chain_prefix(mats)
            W = V.T @ U
            dW = B.T @ dM
            dmats = []
            below = W
            for idx, m in enumerate(mats):
                dmats.append(suffix[idx].T @ dM @ below.T)
                below = m @ below
            return Gradient(U @ dW.T, V @ dW, tuple(dmats))
        W3, W4 = om.matrices
        if om.pattern in ("none", "skip1"):
            S = V.T if om.pattern == "none" else V.T + np.eye(net.n_v)
            SU = S @ U
            dW4 = dM @ (W3 @ SU).T
            dW3 = W4.T @ dM @ SU.T
            dS = (W4 @ W3).T @ dM @ U.T
            dU = (W4 @ W3 @ S).T @ dM
            return Gradient(dS.T, dU, (dW3, dW4))
        S2 = W3 @ V.T + np.eye(W3.shape[0])
        dW4 = dM @ (S2 @ U).T
        dS2 = W4.T @ dM @ U.T
        dW3 = dS2 @ V
        dV = dS2.T @ W3
        dU = S2.T @ W4.T @ dM
        return Gradient(dV, dU, (dW3, dW4))
    if kind.tag == "conv1d-linear":
        dW = dM.reshape(net.n_v, kind.kernel_size)
        return Gradient(U @ dW.T, V @ dW)
    if kind.family == "attention":
        vlast, K, Q = _attention_parts(net)
        d1 = kind.embed_dim + 1
        G = dM.reshape(d1, d1, d1)
        dvlast = np.einsum("abc,hrb,hrc->ha", G, K, Q)
        dK = np.einsum("abc,ha,hrc->hrb", G, vlast, Q)
        dQ = np.einsum("abc,ha,hrb->hrc", G, vlast, K)
        dV = np.zeros((net.width, d1, d1))
        dV[:, d1 - 1, :] = dvlast
        dU = np.hstack([dK.reshape(net.width, -1), dQ.reshape(net.width, -1)])
        return Gradient(dV.reshape(net.width, -1), dU)
    p = kind.poly_degree
    d = net.n_u
    Upow = _tensor_power(U, p)
    dV = Upow @ dM.T
    dMs = np.stack([_symmetrize(row, p, d).ravel() for row in dM])
    G = (V @ dMs).reshape(net.width, d, d ** (p - 1))
    Upm1 = _tensor_power(U, p - 1) if p > 1 else np.ones((net.width, 1))
    dU = p * np.einsum("hik,hk->hi", G, Upm1)
    return Gradient(dV, dU)


def _moment_value(net, stats: DataStats):
    if feature_name(net.activation) != stats.feature:
        raise ValueError("statistics were computed for a different feature map")
    M = moment(net)
    return (0.5 * np.trace(stats.sigma_yy) - np.sum(M * stats.sigma_yf)
            + 0.5 * np.sum((M @ stats.sigma_ff) * M))


def _moment_value_and_grad(net, stats: DataStats):
    if feature_name(net.activation) != stats.feature:
        raise ValueError("statistics were computed for a different feature map")
    M = moment(net)
    MS = M @ stats.sigma_ff
    value = (0.5 * np.trace(stats.sigma_yy) - np.sum(M * stats.sigma_yf)
             + 0.5 * np.sum(MS * M))
    return float(value), moment_backward(net, MS - stats.sigma_yf)


# ---------------------------------------------------------------------------
# per-sample backpropagation for the remaining kinds
# ---------------------------------------------------------------------------
def _sample_value_and_grad(net: UnitLayerNet, data: Dataset):
    kind = net.activation
    X, Y = data.inputs, data.targets
    P = X.shape[0]
    if kind.family == "fc":
        if net.out_map.kind != "identity":
            raise UnsupportedKindError("out maps are only defined for linear-fc")
        z = X @ net.U.T
        phi = kind.sigma(z)
        delta = phi @ net.V - Y
        dV = phi.T @ delta / P
        dz = (delta @ net.V.T) * kind.dsigma(z)
        dU = dz.T @ X / P
    elif kind.family == "conv":
        patches = X.reshape(P, net.n_v, kind.kernel_size)
        z = np.einsum("pjk,hk->pjh", patches, net.U)
        phi = kind.sigma(z)
        delta = np.einsum("pjh,hj->p", phi, net.V) - Y[:, 0]
        dV = np.einsum("p,pjh->hj", delta, phi) / P
        dz = delta[:, None, None] * net.V.T[None] * kind.dsigma(z)
        dU = np.einsum("pjh,pjk->hk", dz, patches) / P
    else:
        raise UnsupportedKindError(f"no per-sample gradient for {kind.describe()}")
    value = 0.5 * np.mean(np.sum(delta.reshape(P, -1) ** 2, axis=1))
    return float(value), Gradient(dV, dU)


class FeatureCache:
    """Dataset wrapper that stores the moment-form features once."""

    def __init__(self, data: Dataset, kind: ActivationKind):
        self.data = data
        self.F = features(kind, data.inputs)
        self.feature = feature_name(kind)


def value_and_grad(net: UnitLayerNet, data) -> tuple[float, Gradient]:
    """Loss and its gradient in one pass (stats, datasets or feature caches)."""
    kind = net.activation
    if isinstance(data, DataStats):
        return _moment_value_and_grad(net, data)
    if isinstance(data, FeatureCache):
        F, Y = data.F, data.data.targets
    elif kind.moment_form:
        F, Y = features(kind, data.inputs), data.targets
    else:
        return _sample_value_and_grad(net, data)
    P = F.shape[0]
    M = moment(net)
    delta = F @ M.T - Y
    value = 0.5 * np.mean(np.sum(delta * delta, axis=1))
    return float(value), moment_backward(net, delta.T @ F / P)


def grad(net: UnitLayerNet, data) -> Gradient:
    """Analytic gradient dL/dtheta (descent direction is its negative)."""
    return value_and_grad(net, data)[1]


def grad_fd(net: UnitLayerNet, data, h: float = 1e-6) -> Gradient:
    """Central finite differences of ``loss`` over every parameter."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = net.flat()
    out = np.empty_like(base)
    for k in range(base.size):
        e = base.copy()
        e[k] += h
        lp = loss(net.from_flat(e), data)
        e[k] -= 2 * h
        lm = loss(net.from_flat(e), data)
        out[k] = (lp - lm) / (2 * h)
    V, U, mats = _split_flat(net, out)
    return Gradient(V, U, tuple(mats))


# ---------------------------------------------------------------------------
# width reduction
# ---------------------------------------------------------------------------
def constraint_residual(net: UnitLayerNet, c: ManifoldConstraint) -> float:
    check_legal(net.activation, c, net.width)
    return stacked_residual(net.theta, c)


def reduce_width(net: UnitLayerNet, constraint: ManifoldConstraint,
                 tol: float = 1e-8) -> UnitLayerNet:
    """Remove unit ``constraint.i`` keeping the input-output map.

    The removed unit's output weight is folded into the units it depends on
    (equal: v_j += v_i, proportional: v_j += gamma v_i, lindep:
    v_j += gamma_j v_i).  On the manifold this is exactly the doubling /
    (1 + gamma^2) / v_j + gamma_j sum gamma_j' v_j' rule.
    """
    c = constraint
    if net.out_map.kind == "skip":
        raise UnsupportedKindError("width of a skip network is tied to its skip path")
    res = constraint_residual(net, c)
    if res > tol:
        raise NotOnManifoldError(f"constraint residual {res:.3e} exceeds tolerance {tol:.3e}")
    V = net.V.copy()
    vi = V[c.i].copy()
    if c.kind == "equal":
        V[c.j] += vi
    elif c.kind == "proportional":
        gamma = c.gamma
        if gamma is None:
            from .constraints import fitted_gamma
            gamma = fitted_gamma(net.theta[c.i], net.theta[c.j])
        V[c.j] += gamma * vi
    elif c.kind == "lindep":
        for j, g in c.coeffs.items():
            V[j] += g * vi
    keep = [k for k in range(net.width) if k != c.i]
    return net.with_units(V[keep], net.U[keep])
