"""Gradient-descent integration, plateau detection and effective width."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datatypes import Dataset, DataStats
from .kinds import UnsupportedKindError
from .netcore import FeatureCache, UnitLayerNet, value_and_grad

WIDTH_MODES = ("rank", "rays", "active-units")


class DivergenceError(RuntimeError):
    """Non-finite loss during integration; carries the last finite state."""

    def __init__(self, message, last_net, step):
        super().__init__(message)
        self.last_net = last_net
        self.step = step


@dataclass
class Trajectory:
    steps: np.ndarray
    times: np.ndarray
    losses: np.ndarray
    snapshot_steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    metric_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    lr: float = 1.0
    scheme: str = "euler"

    @property
    def final(self) -> UnitLayerNet:
        return self.snapshots[-1]

    @property
    def snapshot_times(self) -> np.ndarray:
        return np.asarray(self.snapshot_steps, dtype=float) * self.lr

    def snapshot_near(self, t: float) -> UnitLayerNet:
        k = int(np.argmin(np.abs(self.snapshot_times - t)))
        return self.snapshots[k]


def prepare_data(net: UnitLayerNet, data, use_stats="auto"):
    """Choose the cheapest exact evaluation route for ``data``."""
    if isinstance(data, (DataStats, FeatureCache)):
        return data
    if net.activation.moment_form:
        if use_stats in ("auto", True):
            from .data import compute_stats
            return compute_stats(data, net.activation)
        return FeatureCache(data, net.activation)
    if use_stats is True:
        raise UnsupportedKindError(f"{net.activation.describe()} has no moment form")
    return data


def top_singular_values(net: UnitLayerNet, k: int = 2) -> np.ndarray:
    s = np.linalg.svd(net.U, compute_uv=False)
    out = np.zeros(k)
    out[:min(k, s.size)] = s[:k]
    return out


def integrate(net: UnitLayerNet, data, lr: float, n_steps: int, record_every: int | None = None,
              scheme: str = "euler", use_stats="auto", callback=None,
              n_metric_sv: int = 2) -> Trajectory:
    """Gradient descent (euler) or classical RK4 on the gradient flow.

    Time is measured as ``step * lr``.  ``callback(step, net)`` is invoked
    after every step with the new state.
    """
    if lr <= 0:
        raise ValueError("step size must be positive")
    if scheme not in ("euler", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "rk4" and not net.activation.smooth:
        raise ValueError("rk4 needs a smooth activation kind")
    n_steps = int(n_steps)
    if record_every is None:
        record_every = max(1, n_steps // 100)
    evaluator = prepare_data(net, data, use_stats)
    template = net

    def vg(theta):
        # overflow is reported below as a DivergenceError
        with np.errstate(over="ignore", invalid="ignore"):
            value, g = value_and_grad(template.from_flat(theta), evaluator)
        return value, g.flat()

    theta = net.flat()
    losses = np.empty(n_steps + 1)
    snap_steps, snaps = [], []
    metric_steps, metric_vals = [], []

    def record(step, th):
        cur = template.from_flat(th.copy())
        snap_steps.append(step)
        snaps.append(cur)
        metric_steps.append(step)
        metric_vals.append(top_singular_values(cur, n_metric_sv))

    for step in range(n_steps + 1):
        value, g = vg(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            last = snaps[-1] if snaps else net
            raise DivergenceError(f"non-finite loss at step {step}", last, step)
        losses[step] = value
        if step % record_every == 0 or step == n_steps:
            record(step, theta)
        if step == n_steps:
            break
        if scheme == "euler":
            theta = theta - lr * g
        else:
            k1 = -g
            k2 = -vg(theta + 0.5 * lr * k1)[1]
            k3 = -vg(theta + 0.5 * lr * k2)[1]
            k4 = -vg(theta + lr * k3)[1]
            theta = theta + (lr / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if callback is not None:
            callback(step + 1, template.from_flat(theta))

    steps = np.arange(n_steps + 1)
    vals = np.array(metric_vals)
    metrics = {f"sv{k + 1}": vals[:, k] for k in range(n_metric_sv)}
    return Trajectory(steps, steps * lr, losses, snap_steps, snaps, metrics,
                      np.array(metric_steps, dtype=int), lr, scheme)


# ---------------------------------------------------------------------------
# effective width
# ---------------------------------------------------------------------------
def effective_width(net: UnitLayerNet, mode: str | None = None, tol: float = 0.05,
                    atol: float = 0.05) -> int:
    """Number of units needed to express the current map.

    rank: singular values of the stacked (H, N_v + N_u) unit matrix above
    max(tol * s_max, atol).  rays: greedy leader clusters (cosine > 1 - tol)
    of units with norm above atol.  active-units: units with norm above atol.
    """
    kind = net.activation
    mode = mode or kind.default_width_mode
    if mode not in WIDTH_MODES:
        raise ValueError(f"unknown width mode {mode!r}")
    if mode not in kind.allowed_width_modes():
        raise ValueError(f"width mode {mode!r} does not apply to {kind.describe()}")
    theta = net.theta
    if mode == "rank":
        s = np.linalg.svd(theta, compute_uv=False)
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > max(tol * s[0], atol)))
    norms = np.linalg.norm(theta, axis=1)
    alive = np.flatnonzero(norms > atol)
    if mode == "active-units":
        return int(alive.size)
    leaders = []
    for i in alive:
        d = theta[i] / norms[i]
        if not any(d @ ld > 1.0 - tol for ld in leaders):
            leaders.append(d)
    return len(leaders)


# ---------------------------------------------------------------------------
# plateaus
# ---------------------------------------------------------------------------
@dataclass
class Segment:
    t_start: float
    t_end: float
    mean_loss: float
    effective_width: int = -1
    label: str = "intermediate"

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def as_dict(self) -> dict:
        return {"t_start": self.t_start, "t_end": self.t_end, "duration": self.duration,
                "mean_loss": self.mean_loss, "effective_width": self.effective_width,
                "label": self.label}


@dataclass
class PlateauReport:
    segments: list
    transitions: list

    def count(self, label: str | None = None) -> int:
        if label is None:
            return len(self.segments)
        return sum(seg.label == label for seg in self.segments)

    def of(self, label: str) -> list:
        return [seg for seg in self.segments if seg.label == label]

    @property
    def total_plateau_time(self) -> float:
        return float(sum(seg.duration for seg in self.segments if seg.label != "converged"))

    def as_dict(self) -> dict:
        return {"segments": [s.as_dict() for s in self.segments],
                "transitions": [{"t_mid": t, "loss_drop": d} for t, d in self.transitions]}


def detect_plateaus(traj, slope_tol: float = 1e-3, min_len: float | None = None,
                    floor: float | None = None, width_mode: str | None = None,
                    width_tol: float = 0.05, width_atol: float = 0.05,
                    converged_rtol: float = 1e-3) -> PlateauReport:
    """Maximal intervals where |d log(loss)/dt| < slope_tol lasting >= min_len.

    ``traj`` is a Trajectory or a pair (times, losses).  Losses are clipped
    below at ``floor`` so that a converged run ends on a flat segment.
    Segment labels: 'initial' (starts at the first time point), 'converged'
    (runs to the end with mean loss below converged_rtol times the initial
    loss) or 'intermediate'.  Data with an irreducible loss floor need a
    correspondingly larger converged_rtol.
    """
    if isinstance(traj, Trajectory):
        t, L = traj.times, traj.losses
    else:
        t, L = (np.asarray(a, dtype=float) for a in traj)
    if t.size < 2:
        raise ValueError("need at least two points")
    if min_len is None:
        min_len = 0.05 * (t[-1] - t[0])
    lo = floor if floor is not None else np.finfo(float).tiny
    y = np.log(np.maximum(L, lo))
    slope = np.gradient(y, t)
    flat = np.abs(slope) < slope_tol
    segments = []
    k = 0
    n = t.size
    while k < n:
        if not flat[k]:
            k += 1
            continue
        j = k
        while j + 1 < n and flat[j + 1]:
            j += 1
        if t[j] - t[k] >= min_len:
            segments.append(Segment(float(t[k]), float(t[j]), float(np.mean(L[k:j + 1]))))
        k = j + 1
    scale = L[0]
    for seg in segments:
        if seg.t_start <= t[0]:
            seg.label = "initial"
        elif seg.t_end >= t[-1] and seg.mean_loss <= converged_rtol * scale:
            seg.label = "converged"
        if isinstance(traj, Trajectory) and traj.snapshots:
            net = traj.snapshot_near(0.5 * (seg.t_start + seg.t_end))
            seg.effective_width = effective_width(net, width_mode, width_tol, width_atol)
    transitions = []
    for a, b in zip(segments[:-1], segments[1:]):
        transitions.append((0.5 * (a.t_end + b.t_start), a.mean_loss - b.mean_loss))
    return PlateauReport(segments, transitions)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------
def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Columns step,time,loss,metric:<name>; metric cells are empty between records."""
    names = list(traj.metrics)
    lookup = {int(s): k for k, s in enumerate(traj.metric_steps)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "loss"] + [f"metric:{n}" for n in names])
        for s, tm, ls in zip(traj.steps, traj.times, traj.losses):
            row = [int(s), repr(float(tm)), repr(float(ls))]
            k = lookup.get(int(s))
            row += [repr(float(traj.metrics[n][k])) if k is not None else "" for n in names]
            w.writerow(row)


def write_snapshot_csv(net: UnitLayerNet, step: int, path) -> None:
    """Flat parameter dump keyed by (step, unit, role, index).

    Roles are 'v' and 'u' for unit parameters; out-map matrix l is written
    with role 'W<l>', unit = row and index = column.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "unit", "role", "index", "value"])
        for role, arr in (("v", net.V), ("u", net.U)):
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    w.writerow([step, i, role, j, repr(float(arr[i, j]))])
        for lvl, m in enumerate(net.out_map.matrices):
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    w.writerow([step, i, f"W{lvl}", j, repr(float(m[i, j]))])


def write_snapshots(traj: Trajectory, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for step, net in zip(traj.snapshot_steps, traj.snapshots):
        p = directory / f"step_{int(step):08d}.csv"
        write_snapshot_csv(net, int(step), p)
        paths.append(p)
    return paths
