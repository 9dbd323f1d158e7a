"""Command line entry point: ``flowrl <subcommand> [--config FILE ...] [--set key=value ...]``.

The subcommand fixes the experiment kind. On a configuration error the
process prints one line ``error: <message>`` to stderr and exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..diffnet import NonFiniteError
from .config import ConfigError, ExperimentKind, load_config
from .experiments import run
from .io import dumps

SUBCOMMANDS = {
    "gen-dataset": ExperimentKind.GEN_DATASET,
    "pretrain": ExperimentKind.PRETRAIN,
    "noise-sweep": ExperimentKind.NOISE_SWEEP,
    "reinforce": ExperimentKind.REINFORCE_ENERGY,
    "anneal-reinforce": ExperimentKind.REINFORCE_ANNEAL,
    "evaluate": ExperimentKind.EVALUATE,
    "step-sweep": ExperimentKind.STEP_SWEEP,
    "sweep": ExperimentKind.RANDOM_SEARCH,
    "anneal-baseline": ExperimentKind.ANNEAL_BASELINE_SWEEP,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrl", description="Reinforcement of flow samplers on a toy periodic world.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind.value} experiment")
        p.add_argument("--config", action="append", default=[], metavar="FILE",
                       help="YAML config file; repeat to layer several, later files win")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key; the value is parsed as YAML (repeatable)")
        p.add_argument("--print-config", action="store_true", help="print the resolved config as JSON and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = SUBCOMMANDS[args.command]
    try:
        cfg = load_config(args.config, [*args.overrides, f"kind={kind.value}"])
        if args.print_config:
            from .config import to_plain

            print(json.dumps(to_plain(cfg), indent=2, sort_keys=True))
            return 0
        summary = run(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, NonFiniteError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(dumps({"kind": kind.value, "out_dir": cfg.out_dir, "summary_keys": sorted(summary)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
