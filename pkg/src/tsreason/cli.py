"""Command-line entry point: ``tsreason {forecast,sweep,uncertainty,ablate,diagnose}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config, parse_provider_arg
from .exceptions import TSReasonError
from .runner import cmd_ablate, cmd_diagnose, cmd_forecast, cmd_sweep, cmd_uncertainty


def _overrides(args) -> dict:
    out = {}
    if args.provider:
        out["provider"] = parse_provider_arg(args.provider)
    if args.strategy:
        out["strategy"] = args.strategy
    if args.temperature is not None:
        out["sampling.temperature"] = args.temperature
    if args.l is not None:
        out["lookback"] = args.l
    if args.h is not None:
        out["horizon"] = args.h
    if args.k is not None:
        out["uncertainty_k" if args.command == "uncertainty" else "generations"] = args.k
    if args.seed is not None:
        out["seed"] = args.seed
    if args.cache_dir:
        out["cache_dir"] = args.cache_dir
    if args.out:
        out["output_dir"] = args.out
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsreason", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--provider", help="kind[:key=value,...] or preset:<name>")
        p.add_argument("--strategy", choices=["one_shot", "decoupled", "rollout"])
        p.add_argument("--temperature", type=float)
        p.add_argument("--l", type=int, help="lookback length")
        p.add_argument("--h", type=int, help="horizon length")
        p.add_argument("--k", type=int, help="generations per window")
        p.add_argument("--seed", type=int)
        p.add_argument("--cache-dir")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--run-dir", help="explicit run directory (resumes if it has a manifest)")
        return p

    run_command("forecast", "forecast every test window and score it")
    run_command("sweep", "run the cartesian grid of sweep axes")
    unc = run_command("uncertainty", "many generations per window with quantile bands")
    unc.add_argument("--level", type=float, help="band level (default 0.8)")
    abl = run_command("ablate", "prompt-ablation or missing-data table")
    abl.add_argument("--table", choices=["prompt", "missing"], default="prompt")

    diag = sub.add_parser("diagnose", help="offline failure-mode diagnosis of a run directory")
    diag.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            report = cmd_diagnose(args.run_dir)
            print(json.dumps({k: v for k, v in report.items() if k != "heatmap"}, indent=2))
            return 0
        cfg = load_config(args.config, _overrides(args))
        if args.command == "forecast":
            result = cmd_forecast(cfg, args.run_dir)
        elif args.command == "uncertainty":
            result = cmd_uncertainty(cfg, args.run_dir, level=args.level)
        elif args.command == "sweep":
            out, rows = cmd_sweep(cfg, args.run_dir)
            print(out / "combined.csv")
            return 0
        else:
            out, rows = cmd_ablate(cfg, args.run_dir, table=args.table)
            print(out / f"ablation_{args.table}.csv")
            return 0
    except TSReasonError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(result.run_dir)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
