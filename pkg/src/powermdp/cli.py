"""Command-line entry point for sweeps and validation runs."""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import METHODS, ExperimentSpec, load_config, run_experiment, validate
from .params import SystemParams

DEFAULT_CONFIG = {
    "params": {"C": 100, "Q": 100, "lam": 30.0, "mu": 1.0, "gamma": 2.0, "c_perf": 50.0,
               "c_power": 1.0, "c_power_setup": 2.0, "epsilon": 0.01},
    "sweep": {"param": "c_perf", "values": [1, 2, 5, 10, 20, 50, 100]},
    "methods": list(METHODS),
    "levels": [10],
    "seeds": [0],
    "events": 0,
    "out": "results",
}


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def parse_sweep(text: str) -> dict:
    """'lambda=10,20,30' -> {'param': 'lambda', 'values': [10.0, 20.0, 30.0]}."""
    name, sep, vals = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"sweep must look like name=v1,v2,..., got {text!r}")
    return {"param": name.strip(), "values": [float(v) for v in vals.split(",") if v.strip()]}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="powermdp-bench",
        description="Solve, evaluate and simulate server power-management policies.")
    ap.add_argument("--config", help="JSON file with params, sweep, methods, levels, seeds, events, out")
    ap.add_argument("--sweep", type=parse_sweep, help="e.g. c_perf=1,2,5 or lambda=10,20 or gamma=0.5,1")
    ap.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
    ap.add_argument("--levels", type=_ints, help="level counts L for the aggregated models")
    ap.add_argument("--seeds", type=_ints, help="simulation seeds")
    ap.add_argument("--events", type=int, help="events per simulation run; 0 skips simulation")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--validate", action="store_true",
                    help="run the model consistency checks instead of a sweep")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a system parameter, e.g. --set C=20")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _config(args) -> dict:
    cfg = {**DEFAULT_CONFIG, "params": dict(DEFAULT_CONFIG["params"])}
    if args.config:
        user = load_config(args.config)
        cfg["params"].update(user.pop("params", {}))
        cfg.update(user)
    for item in args.set:
        key, _, val = item.partition("=")
        cfg["params"][key] = int(val) if key in ("C", "Q") else float(val)
    if args.sweep:
        cfg["sweep"] = args.sweep
    if args.methods:
        cfg["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    for key in ("levels", "seeds", "events", "out"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args)
    if args.validate:
        params = SystemParams(**cfg["params"])
        report = validate(params, cfg.get("levels", [50, 20, 10]))
        print(report.format())
        return 0 if report.ok else 1
    spec = ExperimentSpec.from_dict(cfg)
    report = run_experiment(spec)
    for name, path in report.files.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
