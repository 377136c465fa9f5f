"""Training sets, second-moment statistics and weight initializations."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import ManifoldConstraint
from .datatypes import Dataset, DataStats
from .kinds import ActivationKind, as_kind
from .netcore import OutMap, UnitLayerNet, feature_name, features

STREAMS = {"init": 1, "data": 2, "noise": 3}

DATASET_KINDS = ("linear-fc-teacher", "linear-conv", "relu-orthogonal", "relu-conv",
                 "icl-regression", "quadratic-teacher", "generic-teacher", "csv")

# Teacher map for the fully-connected linear example.  Any full-rank W* gives
# the same qualitative picture; this one has a well separated spectrum of
# W* C W*^T under the input covariance C = [[1, 1], [1, 4]].
DEFAULT_LINEAR_TEACHER = ((1.0, 0.0), (0.0, 0.05))
DEFAULT_LINEAR_COV = ((1.0, 1.0), (1.0, 4.0))
CONV_TEACHER = np.array([1.0, 1.0, -1.0, 1.0]) / np.sqrt(5.0)


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent generator for a named stream of a run."""
    return np.random.default_rng([int(seed), int(index), STREAMS[name]])


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_orthogonal(n: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def power_law_spectrum(kappa: float, D: int) -> np.ndarray:
    """s_n = n^-kappa for n = 1..D, normalized to sum one."""
    s = np.arange(1, D + 1, dtype=float) ** (-float(kappa))
    return s / s.sum()


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------
def gen_dataset(kind: str, params: dict | None = None, P: int = 8192, seed=0) -> Dataset:
    """Build one of the named training sets; deterministic given ``seed``."""
    params = dict(params or {})
    rng = _rng(seed)
    if kind == "linear-fc-teacher":
        W = np.asarray(params.get("W_star", DEFAULT_LINEAR_TEACHER), dtype=float)
        cov = np.asarray(params.get("cov", DEFAULT_LINEAR_COV), dtype=float)
        X = rng.multivariate_normal(np.zeros(cov.shape[0]), cov, size=P, method="cholesky")
        return Dataset(X, X @ W.T, kind, {"W_star": W.tolist(), "cov": cov.tolist()})
    if kind == "linear-conv":
        w = np.asarray(params.get("w_star", CONV_TEACHER), dtype=float)
        cov = np.asarray(params.get("cov", np.diag([1.0, 1.0, 2.0, 1.0])), dtype=float)
        X = rng.multivariate_normal(np.zeros(cov.shape[0]), cov, size=P, method="cholesky")
        return Dataset(X, X @ w, kind, {"w_star": w.tolist()})
    if kind == "relu-orthogonal":
        X = np.array([[1.0, 0.5], [-1.0, 2.0]])
        return Dataset(X, np.array([1.0, -1.0]), kind)
    if kind == "relu-conv":
        w = np.asarray(params.get("w_star", CONV_TEACHER), dtype=float)
        X = np.diag([2.0, 2.0, 2.0 * np.sqrt(2.0), 2.0])
        return Dataset(X, X @ w, kind, {"w_star": w.tolist()})
    if kind == "icl-regression":
        D = int(params.get("embed_dim", 2))
        N = int(params.get("context_len", 32))
        xs = rng.standard_normal((P, D, N + 1))
        w = rng.standard_normal((P, D))
        labels = np.einsum("pd,pdn->pn", w, xs)
        X = np.concatenate([xs, labels[:, None, :]], axis=1)
        y = labels[:, N].copy()
        X[:, D, N] = 0.0
        return Dataset(X, y, kind, {"embed_dim": D, "context_len": N})
    if kind == "quadratic-teacher":
        W = np.asarray(params.get("teacher", np.eye(2)), dtype=float)
        X = rng.standard_normal((P, W.shape[1]))
        return Dataset(X, np.sum((X @ W.T) ** 2, axis=1), kind)
    if kind == "generic-teacher":
        act = as_kind(params.get("activation", "relu-fc"))
        tu = np.atleast_2d(np.asarray(params["teacher_u"], dtype=float))
        tv = np.asarray(params.get("teacher_v", np.ones(tu.shape[0])), dtype=float)
        X = rng.standard_normal((P, tu.shape[1]))
        y = act.sigma(X @ tu.T) @ tv
        return Dataset(X, y, kind, {"activation": act.describe()})
    if kind == "csv":
        return read_dataset_csv(params["path"])
    raise ValueError(f"unknown dataset kind {kind!r}")


def gen_spectrum_dataset(kappa: float, D: int, mode: str = "linear", P: int = 8192,
                         seed=0) -> tuple[Dataset, DataStats]:
    """Dataset plus exact statistics with a power-law spectrum.

    linear: Sigma_zz = I and Sigma_yz = Q diag(s) R^T.
    quadratic: symmetric Sigma_yZ of size D+1 with eigenvalues
    (s_1, ..., s_D, -s_D / 2), realized by the teacher y = x^T M x with
    M = (Sigma_yZ - tr(M) I) / 2.  Sigma_ZZ is the sample estimate and
    Sigma_yy is set so that the minimum loss is zero.
    """
    if kappa < 0 or D < 1:
        raise ValueError("need kappa >= 0 and D >= 1")
    rng = _rng(seed)
    s = power_law_spectrum(kappa, D)
    if mode == "linear":
        Q = random_orthogonal(D, rng)
        R = random_orthogonal(D, rng)
        syz = Q @ np.diag(s) @ R.T
        Z = rng.standard_normal((P, D))
        data = Dataset(Z, Z @ syz.T, "spectrum-linear", {"s": s.tolist()})
        stats = DataStats("linear", syz, np.eye(D), syz @ syz.T, "prescribed", D)
        return data, stats
    if mode == "quadratic":
        n = D + 1
        evals = np.concatenate([s, [-0.5 * s[-1]]])
        R = random_orthogonal(n, rng)
        syZ = R @ np.diag(evals) @ R.T
        syZ = 0.5 * (syZ + syZ.T)
        M = 0.5 * (syZ - np.trace(syZ) / (n + 2) * np.eye(n))
        X = rng.standard_normal((P, n))
        y = np.einsum("pi,ij,pj->p", X, M, X)
        F = features(ActivationKind("quadratic-fc"), X)
        sZZ = F.T @ F / P
        yf = syZ.reshape(1, -1)
        syy = yf @ np.linalg.pinv(sZZ, rcond=1e-10) @ yf.T
        data = Dataset(X, y, "spectrum-quadratic", {"s": evals.tolist()})
        return data, DataStats("poly2", yf, sZZ, syy, "prescribed", n)
    raise ValueError(f"unknown spectrum mode {mode!r}")


def compute_stats(data: Dataset, for_kind) -> DataStats:
    """Empirical second moments of the feature map used by ``for_kind``."""
    kind = as_kind(for_kind)
    F = features(kind, data.inputs)
    Y = data.targets
    P = data.P
    return DataStats(feature_name(kind), Y.T @ F / P, F.T @ F / P, Y.T @ Y / P,
                     f"empirical({P})", data.inputs.shape[1])


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------
def write_dataset_csv(data: Dataset, path) -> None:
    X = data.inputs.reshape(data.P, -1)
    header = [f"x{k}" for k in range(X.shape[1])] + [f"y{k}" for k in range(data.output_dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.hstack([X, data.targets]):
            w.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    xcols = [k for k, h in enumerate(header) if h.startswith("x")]
    ycols = [k for k, h in enumerate(header) if h.startswith("y")]
    if header != [f"x{k}" for k in range(len(xcols))] + [f"y{k}" for k in range(len(ycols))]:
        raise ValueError(f"{path}: header must be x0..x(n-1), y0..y(m-1)")
    if not xcols or not ycols or len(rows) < 2:
        raise ValueError(f"{path}: need at least one input, one target and one row")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed CSV ({exc})") from None
    if body.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return Dataset(body[:, xcols], body[:, ycols], "csv", {"path": str(path)})


def write_matrix_csv(mat, path) -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    with open(path, "w", newline="") as fh:
        fh.write(f"{mat.shape[0]},{mat.shape[1]}\n")
        w = csv.writer(fh)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
        mat = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed matrix CSV ({exc})") from None
    if mat.shape != (rows, cols):
        raise ValueError(f"{path}: shape header {rows}x{cols} does not match body")
    return mat


def load_prescribed_stats(sigma_yz_path, sigma_zz_path, sigma_yy_path=None) -> DataStats:
    """Linear statistics from matrix CSV files; Sigma_yy defaults to the realizable value."""
    syz = read_matrix_csv(sigma_yz_path)
    szz = read_matrix_csv(sigma_zz_path)
    if sigma_yy_path is None:
        syy = syz @ np.linalg.solve(szz, syz.T)
    else:
        syy = read_matrix_csv(sigma_yy_path)
    return DataStats("linear", syz, szz, syy, "prescribed", szz.shape[0])


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NetShape:
    """Everything needed to allocate a network except the parameter values."""

    activation: ActivationKind
    width: int
    n_v: int
    n_u: int
    out_kind: str = "identity"
    out_shapes: tuple = ()
    pattern: str = "none"

    @staticmethod
    def of(net: UnitLayerNet) -> "NetShape":
        om = net.out_map
        return NetShape(net.activation, net.width, net.n_v, net.n_u, om.kind,
                        tuple(m.shape for m in om.matrices), om.pattern)


@dataclass(frozen=True)
class InitSpec:
    """Initialization scheme.

    isotropic: every entry N(0, epsilon^2).
    low-rank: theta_i = sum_k sigma alpha_ik [q_k; r_k] + N(0, delta^2) with
    random orthonormal directions and alpha_ik ~ N(0, 1/H).
    manifold-adjacent: isotropic(epsilon) projected on each constraint, then
    N(0, delta^2) added.
    """

    scheme: str = "isotropic"
    epsilon: float = 1e-6
    rank: int = 1
    sigma: float = 1.0
    delta: float = 0.0
    constraints: tuple = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("isotropic", "low-rank", "manifold-adjacent"):
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        if self.epsilon <= 0 or self.sigma <= 0 or self.delta < 0:
            raise ValueError("need epsilon > 0, sigma > 0 and delta >= 0")


def init_weights(shape: NetShape, spec: InitSpec, rng=None) -> UnitLayerNet:
    rng = _rng(spec.seed if rng is None else rng)
    H, n_v, n_u = shape.width, shape.n_v, shape.n_u
    if spec.scheme == "low-rank":
        r = int(spec.rank)
        if not 1 <= r <= min(n_v, n_u, H):
            raise ValueError(f"low-rank init needs 1 <= rank <= {min(n_v, n_u, H)}")
        qv = random_orthogonal(n_v, rng)[:, :r]
        ru = random_orthogonal(n_u, rng)[:, :r]
        alpha = rng.standard_normal((H, r)) / np.sqrt(H)
        V = spec.sigma * alpha @ qv.T
        U = spec.sigma * alpha @ ru.T
        scale = spec.sigma
    else:
        V = spec.epsilon * rng.standard_normal((H, n_v))
        U = spec.epsilon * rng.standard_normal((H, n_u))
        scale = spec.epsilon
    mats = tuple(scale * rng.standard_normal(s) for s in shape.out_shapes)
    om = OutMap(shape.out_kind, mats, shape.pattern) if shape.out_kind != "identity" else OutMap()
    net = UnitLayerNet(shape.activation, V, U, om)
    if spec.scheme == "manifold-adjacent":
        from .manifold import project
        for c in spec.constraints:
            c = c if isinstance(c, ManifoldConstraint) else ManifoldConstraint(**c)
            net = project(net, c)
    if spec.delta > 0:
        net = net.replace(net.V + spec.delta * rng.standard_normal(net.V.shape),
                          net.U + spec.delta * rng.standard_normal(net.U.shape))
    return net
