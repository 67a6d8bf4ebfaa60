#!/usr/bin/env python3
"""Run every config in a directory and write one CSV (or JSON) per experiment.

    python3 scripts/run_experiments.py scripts/configs --out results --shards 4
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from bpre_lab.config import ConfigError, load_config
from bpre_lab.runner import run_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("configs", type=Path, help="directory of .json/.toml configs, or a single file")
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--format", choices=("csv", "json"), default="csv")
    ap.add_argument("--shards", type=int, default=None)
    ap.add_argument("--only", nargs="*", help="experiment names to run")
    args = ap.parse_args(argv)

    paths = [args.configs] if args.configs.is_file() else sorted(
        p for p in args.configs.iterdir() if p.suffix in (".json", ".toml"))
    status = 0
    for p in paths:
        try:
            cfg = load_config(p)
        except ConfigError as e:
            print(f"skipping {p}: {e}", file=sys.stderr)
            status = 2
            continue
        if args.only and cfg.experiment not in args.only:
            continue
        if args.shards:
            cfg = replace(cfg, shards=args.shards)
        t0 = time.perf_counter()
        rc = run_config(cfg, args.out / p.stem, args.format)
        print(f"{p.name}: {'gates ok' if rc == 0 else 'some gate FAILED'} ({time.perf_counter() - t0:.1f}s)")
        status = max(status, rc)
    return status


if __name__ == "__main__":
    sys.exit(main())
