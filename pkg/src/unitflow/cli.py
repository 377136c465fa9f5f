"""Command-line entry point.

    unitflow run CONFIG.yaml [--out DIR] [--set key=value ...]
    unitflow preset NAME [--out DIR] [--set key=value ...]
    unitflow list-presets

Validation failures exit with status 2 and print a JSON error object to
stderr naming the offending key.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml
from pydantic import ValidationError

from .config import ExperimentConfig, apply_overrides
from .presets import list_presets, preset_dict
from .runner import run, run_sweep

EXIT_INVALID = 2


def _error(kind: str, message: str, key: str | None = None, details=None) -> int:
    payload = {"error": kind, "message": message, "key": key}
    if details is not None:
        payload["details"] = details
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return EXIT_INVALID


def _validation_error(exc: ValidationError) -> int:
    errs = exc.errors(include_url=False, include_context=False, include_input=False)
    details = [{"key": ".".join(str(p) for p in e["loc"]), "message": e["msg"]} for e in errs]
    first = details[0] if details else {"key": None, "message": str(exc)}
    return _error("validation", first["message"], first["key"], details)


def _build(raw: dict, overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.model_validate(raw)
    return apply_overrides(cfg, overrides) if overrides else cfg


def _execute(cfg: ExperimentConfig, out: str | None) -> int:
    out_dir = out or cfg.output_dir or f"runs/{cfg.name}"
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if cfg.sweep is not None and (cfg.sweep.values or cfg.sweep.seeds):
        rows = run_sweep(cfg, out_dir)
        brief = [{"point": r["point"], "final_loss": r["summary"]["final_loss"],
                  "plateau_count": r["summary"]["plateau_count"]} for r in rows]
        print(json.dumps({"output_dir": out_dir, "points": brief}, indent=2))
    else:
        res = run(cfg, out_dir)
        s = res.summary
        print(json.dumps({"output_dir": out_dir, "final_loss": s["final_loss"],
                          "plateau_count": s["plateau_count"],
                          "plateau_widths": s["plateau_widths"]}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unitflow",
                                description="Gradient-flow experiments on unit-layer networks")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a YAML/JSON config")
    r.add_argument("config")
    pr = sub.add_parser("preset", help="run a named preset")
    pr.add_argument("name")
    for q in (r, pr):
        q.add_argument("--out", default=None, help="output directory")
        q.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry (repeatable)")
    sub.add_parser("list-presets", help="print the preset names")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-presets":
        for name in list_presets():
            print(name)
        return 0
    try:
        if args.command == "preset":
            raw = preset_dict(args.name)
        else:
            raw = yaml.safe_load(Path(args.config).read_text())
            if not isinstance(raw, dict):
                return _error("validation", "config must be a mapping", None)
        cfg = _build(raw, args.overrides)
    except ValidationError as exc:
        return _validation_error(exc)
    except KeyError as exc:
        key = exc.args[0] if exc.args else None
        kind = "unknown-preset" if args.command == "preset" else "unknown-key"
        return _error(kind, str(exc), key if kind == "unknown-key" else None)
    except (OSError, yaml.YAMLError, ValueError) as exc:
        return _error("config", str(exc))
    return _execute(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
