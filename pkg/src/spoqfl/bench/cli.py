"""``spoqfl`` command line: train, sweep, compare, inspect.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..qnn import checkpoint_dict, load_checkpoint
from .config import ConfigError, ExperimentConfig
from .runner import SWEEP_AXES, run_compare, run_experiment, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(args.set)
    if args.output:
        # a command-line path is relative to the shell, not to the config file
        cfg = cfg.with_value("run", "output", str(Path(args.output).resolve()))
    return cfg


def cmd_train(args) -> int:
    out = run_experiment(_load(args))
    print(out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = run_sweep(cfg, args.axis, values)
    print(f"{args.axis:>12}  {'final_loss':>10}  {'final_acc':>9}  status")
    for r in rows:
        print(f"{r.value:>12}  {r.final_loss:10.4f}  {r.final_accuracy:9.3f}  {r.status}")
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_RUNTIME


def cmd_compare(args) -> int:
    for path in run_compare(_load(args)):
        print(path)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rec = checkpoint_dict(model)
    if not args.full:
        n = len(rec["params"])
        rec["params"] = f"<{n} values, |w|_max={max(map(abs, rec['params']), default=0.0):.4g}>"
    print(json.dumps(rec, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spoqfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (section.key or unique key); repeatable")
        sp.add_argument("--output", help="output directory (overrides run.output)")

    sp = sub.add_parser("train", help="single federated run")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="one run per value of an ablation axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated axis values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="paired QFL vs SpoQFL run with plot data")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("inspect", help="print a model checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--full", action="store_true", help="print every parameter")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
