"""Run one configured experiment (or a sweep) and write its artifacts.

Artifacts per run: trajectory.csv, plateaus.json, snapshots/step_*.csv,
predictions.json (and saddle_atlas.csv for linear nets) and summary.json.
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, set_path
from .constraints import ManifoldConstraint
from .data import (NetShape, InitSpec, compute_stats, gen_dataset, gen_spectrum_dataset,
                   init_weights, substream)
from .datatypes import DataStats
from .dynamics import (Trajectory, PlateauReport, detect_plateaus, effective_width, integrate,
                       prepare_data, write_snapshots, write_trajectory_csv)
from .landscape import enumerate_linear_saddles, linear_saddle, width_one_saddle, \
    write_saddle_atlas
from .netcore import UnitLayerNet
from .theory import escape_time, spectral, unit_order_prediction


@dataclass
class RunResult:
    config: ExperimentConfig
    net0: UnitLayerNet
    data: object
    evaluator: object
    trajectory: Trajectory
    report: PlateauReport
    predictions: dict
    summary: dict


def _clean(obj):
    """Make an object JSON-safe: numpy to python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def build_data(cfg: ExperimentConfig):
    """Return (dataset, prescribed stats or None)."""
    d = cfg.data
    rng = substream(cfg.seed, "data")
    if d.kind == "spectrum":
        data, stats = gen_spectrum_dataset(d.kappa, d.D, d.mode, d.P, rng)
        return data, (stats if d.stats == "prescribed" else None)
    return gen_dataset(d.kind, d.params, d.P, rng), None


def build_shape(cfg: ExperimentConfig, data) -> NetShape:
    m = cfg.model
    kind = m.kind()
    n_v, n_u = kind.unit_dims(data.input_dim, data.output_dim)
    out_shapes = ()
    if m.out_map == "chain":
        widths = list(m.chain_widths)
        if not widths:
            raise ValueError("chain out map needs chain_widths")
        n_v = widths[0]
        dims = widths + [data.output_dim]
        out_shapes = tuple((dims[k + 1], dims[k]) for k in range(len(widths)))
    elif m.out_map == "skip":
        hidden = m.skip_width or m.width
        n_v = m.width if m.skip_pattern == "skip1" else hidden
        w3_rows = m.width if m.skip_pattern == "skip2" else hidden
        out_shapes = ((w3_rows, n_v), (data.output_dim, w3_rows))
    return NetShape(kind, m.width, n_v, n_u, m.out_map, out_shapes, m.skip_pattern)


def build_net(cfg: ExperimentConfig, data) -> UnitLayerNet:
    i = cfg.init
    eps = i.epsilon / math.sqrt(cfg.model.width) if i.scale_by_width else i.epsilon
    cons = tuple(ManifoldConstraint(**c) for c in i.constraints)
    spec = InitSpec(i.scheme, eps, i.rank, i.sigma, i.delta, cons, cfg.seed)
    return init_weights(build_shape(cfg, data), spec, substream(cfg.seed, "init"))


def _stats_for(net, data, prescribed):
    if prescribed is not None:
        return prescribed
    if net.activation.moment_form:
        return compute_stats(data, net.activation)
    return None


def _atlas(stats) -> dict:
    """Saddle atlas entries; a degenerate spectrum is flagged instead of warned."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        saddles = enumerate_linear_saddles(stats)
    return {"saddle_atlas": [{"index_set": s.bitmask, "rank": s.rank,
                              "saddle_loss": s.saddle_loss} for s in saddles],
            "saddle_atlas_degenerate": bool(saddles[0].degenerate),
            "_saddles": saddles}


def predictions_for(net0: UnitLayerNet, stats, threshold: float = 1.0) -> dict:
    """Theory predictions available for this architecture (empty when none apply)."""
    kind = net0.activation
    out: dict = {}
    if stats is None or net0.out_map.kind != "identity":
        if stats is not None and kind.tag == "linear-fc":
            out.update(_atlas(stats))
        return out
    if kind.tag in ("linear-fc", "conv1d-linear"):
        positions = net0.n_v if kind.tag == "conv1d-linear" else None
        dec = spectral(stats, "linear-svd", conv_positions=positions)
        out["spectrum"] = dec.s
        out["multiplicity"] = dec.multiplicity
        out["escape_times"] = {
            "global": escape_time(dec, net0, threshold),
            "per_unit": escape_time(dec, net0, threshold, per_unit=True),
            "threshold": threshold}
        if kind.tag == "linear-fc" and stats.sigma_yz.shape[0] <= 8:
            out.update(_atlas(stats))
    elif kind.tag == "quadratic-fc":
        dec = spectral(stats, "quad-eig", symmetrize=True)
        pred = unit_order_prediction(net0, dec, units="network")
        out["spectrum"] = dec.s
        out["t_infinity_per_unit"] = pred.t_infinity
        out["predicted_order"] = pred.order
        out["ties"] = pred.ties
        out["escape_times"] = {"global": float(np.min(pred.t_infinity)), "units": "network"}
    return out


def saddle_reference(net0, traj, report, evaluator, stats, enabled=True) -> dict:
    """Width-1 saddle loss next to the first intermediate plateau."""
    inter = report.of("intermediate")
    if not enabled or not inter:
        return {}
    seg = inter[0]
    kind = net0.activation
    if net0.out_map.kind == "skip":
        # skip paths tie N_v or W3 to the width, so no width-1 reduction exists
        return {"saddle_method": "unavailable", "plateau_loss": seg.mean_loss}
    if kind.tag == "linear-fc" and net0.out_map.kind != "skip" and stats is not None:
        ref, how = linear_saddle(stats, (0,)).saddle_loss, "linear-lattice"
    else:
        snap = traj.snapshot_near(0.5 * (seg.t_start + seg.t_end))
        _, ref = width_one_saddle(snap, evaluator)
        how = "measured"
    rel = abs(seg.mean_loss - ref) / abs(ref) if ref != 0 else float("inf")
    return {"width_one_saddle_loss": ref, "saddle_method": how,
            "plateau_loss": seg.mean_loss, "saddle_rel_error": rel}


def summarize(cfg, traj, report, net_final, analysis, saddle, preds) -> dict:
    L = traj.losses
    segs = report.segments
    first_transition = report.transitions[0][0] if report.transitions else None
    out = {
        "name": cfg.name, "seed": cfg.seed, "steps": int(traj.steps[-1]), "lr": traj.lr,
        "initial_loss": float(L[0]), "final_loss": float(L[-1]),
        "loss_ratio": float(L[-1] / L[0]) if L[0] > 0 else None,
        "plateau_count": report.count(),
        "intermediate_count": report.count("intermediate"),
        "plateau_labels": [s.label for s in segs],
        "plateau_widths": [s.effective_width for s in segs],
        "plateau_losses": [s.mean_loss for s in segs],
        "plateau_intervals": [[s.t_start, s.t_end] for s in segs],
        "total_plateau_time": report.total_plateau_time,
        "intermediate_time": float(sum(s.duration for s in report.of("intermediate"))),
        "first_intermediate_duration": (report.of("intermediate")[0].duration
                                        if report.of("intermediate") else 0.0),
        "has_initial_plateau": report.count("initial") > 0,
        "first_transition": first_transition,
        "final_effective_width": effective_width(net_final, analysis.width_mode,
                                                 analysis.width_tol, analysis.width_atol),
    }
    if "escape_times" in preds:
        out["escape_time"] = preds["escape_times"]["global"]
    out.update(saddle)
    return out


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------
def run(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Execute one configuration; write artifacts when ``out_dir`` (or cfg.output_dir) is set."""
    data, prescribed = build_data(cfg)
    net0 = build_net(cfg, data)
    t = cfg.train
    source = prescribed if prescribed is not None else data
    evaluator = prepare_data(net0, source)
    traj = integrate(net0, evaluator, t.lr, t.steps, t.record_every, t.scheme)
    a = cfg.analysis
    report = detect_plateaus(traj, a.slope_tol, a.min_len, a.floor_rtol * traj.losses[0],
                             a.width_mode, a.width_tol, a.width_atol, a.converged_rtol)
    stats = evaluator if isinstance(evaluator, DataStats) else _stats_for(net0, data, prescribed)
    preds = predictions_for(net0, stats, a.escape_threshold) if a.predictions else {}
    saddle = saddle_reference(net0, traj, report, evaluator, stats, a.saddle)
    summary = summarize(cfg, traj, report, traj.final, a, saddle, preds)
    result = RunResult(cfg, net0, data, evaluator, traj, report, preds, summary)
    target = out_dir or cfg.output_dir
    if target:
        write_artifacts(result, target)
    return result


def write_artifacts(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(result.trajectory, out / "trajectory.csv")
    write_json(result.report.as_dict(), out / "plateaus.json")
    write_snapshots(result.trajectory, out / "snapshots")
    preds = {k: v for k, v in result.predictions.items() if not k.startswith("_")}
    write_json(preds, out / "predictions.json")
    if "_saddles" in result.predictions:
        write_saddle_atlas(result.predictions["_saddles"], out / "saddle_atlas.csv")
    write_json(result.summary, out / "summary.json")
    write_json(result.config.model_dump(), out / "config.json")


def sweep_points(cfg: ExperimentConfig) -> list:
    """Expand a sweep into (label, config) pairs; one point when there is no sweep."""
    sw = cfg.sweep
    if sw is None or (not sw.values and not sw.seeds):
        return [("", cfg)]
    values = sw.values if sw.key and sw.values else [None]
    seeds = sw.seeds or [cfg.seed]
    points = []
    for value, seed in product(values, seeds):
        raw = cfg.model_dump()
        raw["sweep"] = None
        raw["seed"] = int(seed)
        parts = []
        if value is not None:
            set_path(raw, sw.key, value)
            parts.append(f"{sw.key}={value}")
        parts.append(f"seed={seed}")
        points.append(("/".join(parts), ExperimentConfig.model_validate(raw)))
    return points


def _run_point(args):
    label, cfg, out_dir = args
    res = run(cfg, Path(out_dir) / label if out_dir else None)
    return label, res.summary


def run_sweep(cfg: ExperimentConfig, out_dir=None) -> list:
    """Run every sweep point (optionally in a process pool); returns summaries."""
    out_dir = out_dir or cfg.output_dir
    points = sweep_points(cfg)
    jobs = [(label, c, out_dir) for label, c in points]
    workers = cfg.sweep.workers if cfg.sweep else 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    rows = []
    for (label, c), (_, summary) in zip(points, results):
        key = cfg.sweep.key if cfg.sweep else None
        value = None
        if key:
            node = c.model_dump()
            for p in key.split("."):
                node = node[p]
            value = node
        rows.append({"point": label, "value": value, "seed": c.seed, "summary": summary})
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_json({"key": cfg.sweep.key if cfg.sweep else None, "points": rows},
                   Path(out_dir) / "sweep_summary.json")
    return rows
