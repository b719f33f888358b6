"""Command-line entry point: ``nonrev <subcommand> [--config FILE] [--seed S] [--trials N] [--out PATH]``."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import NonrevError
from .harness import ExperimentConfig, run_experiment

SUBCOMMANDS = {
    "simulate": "sra_convergence",
    "bounds": "bounds_sweep",
    "samplemech": "samplemech",
    "equilibrium": "equilibrium_audit",
    "infer": "inference_loop",
}

DEFAULTS = {
    "simulate": {"distributions": [{"name": "uniform", "lo": 0, "hi": 1}, {"name": "uniform", "lo": 0, "hi": 2}],
                 "T": [4, 16, 64, 256], "trials": 100_000},
    "bounds": {"trials": 100_000, "distributions": [{"name": "uniform", "lo": 0, "hi": 1}]},
    "samplemech": {"distributions": [{"name": "uniform", "lo": 0, "hi": 1}] * 2, "trials": 100_000,
                   "objective": "revenue"},
    "equilibrium": {"distributions": [{"name": "uniform", "lo": 0, "hi": 1}, {"name": "exponential", "rate": 1}],
                    "trials": 20_000},
    "infer": {"distributions": [{"name": "uniform", "lo": 0, "hi": 1}, {"name": "exponential", "rate": 1}],
              "T": [8], "trials": 100_000, "objective": "revenue"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nonrev", description="Non-revelation mechanism simulations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind} experiment")
        p.add_argument("--config", help="TOML experiment file")
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--out", help="CSV output path (stdout when omitted)")
        p.add_argument("--workers", type=int)
        p.add_argument("--objective", choices=("welfare", "revenue"))
        p.add_argument("--T", type=int, nargs="+", dest="T", help="population sizes")
        p.add_argument("--dist", action="append", type=json.loads, metavar="JSON",
                       help='distribution spec, repeat per population, e.g. \'{"name": "uniform", "hi": 2}\'')
        p.add_argument("--env", type=json.loads, metavar="JSON", help='environment spec, e.g. \'{"name": "k_unit", "k": 2}\'')
        if name == "samplemech":
            p.add_argument("--eps", type=float)
            p.add_argument("--budget", type=int, nargs="+", dest="budgets")
        if name == "bounds":
            p.add_argument("--n-max", type=int, dest="n_max")
        if name == "infer":
            p.add_argument("--rounds", type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = dict(DEFAULTS[args.command])
    if args.config:
        base = ExperimentConfig.from_toml(args.config)
        data = {k: v for k, v in base.__dict__.items() if k != "options"} | dict(base.options)
    data["kind"] = SUBCOMMANDS[args.command]
    for key in ("seed", "trials", "out", "workers", "objective", "T"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if args.dist:
        data["distributions"] = args.dist
    if args.env:
        data["env"] = args.env
    for key in ("eps", "budgets", "n_max", "rounds"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        text = run_experiment(cfg)
    except NonrevError as exc:
        print(f"nonrev: error: {exc}", file=sys.stderr)
        return 2
    if not cfg.out:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
