"""``bpre-lab`` command line."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import EXPERIMENTS, ConfigError, RunConfig, load_config
from .runner import run_config


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpre-lab", description=__doc__)
    sub = p.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", help="JSON or TOML run configuration")
        s.add_argument("--law", default=None, help="named law (default: moderate) when no config is given")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--shards", type=int, default=None)
        s.add_argument("-N", type=int, default=None, help="replicates")
        s.add_argument("-n", type=int, default=None, help="generation count")
        s.add_argument("--out", default=None, help="output directory (default: stdout)")
        s.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def make_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"{args.config}: experiment is {cfg.experiment!r}, not {args.experiment!r}")
        if args.law is not None:
            cfg = replace(cfg, law=args.law)
    else:
        cfg = RunConfig(args.experiment, args.law or "moderate")
    over = {k: v for k, v in (("seed", args.seed), ("shards", args.shards), ("N", args.N), ("n", args.n))
            if v is not None}
    for k, v in over.items():
        if v < (0 if k in ("seed", "n") else 1):
            raise ConfigError(f"--{k} must be {'non-negative' if k in ('seed', 'n') else 'positive'}")
    if "n" in over:
        over["n_list"] = None
    return replace(cfg, **over)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = make_config(args)
        cfg.environment_law()
    except (ConfigError, OSError, ValueError) as e:
        print(f"bpre-lab: error: {e}", file=sys.stderr)
        return 2
    return run_config(cfg, args.out, args.format)


if __name__ == "__main__":
    sys.exit(main())
