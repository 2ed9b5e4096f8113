"""``scalimit`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ConfigError, ScalimitError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scalimit", description="Scaling-limit control experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--seed", type=int, help="seed (overrides the config and SCALIMIT_SEED)")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    sub.add_parser("list-experiments", help="list experiment names")
    return p


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(f"scalimit: {kind}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    from .experiments import EXPERIMENTS, run

    if args.command == "list-experiments":
        for name, exp in EXPERIMENTS.items():
            print(f"{name}\t{exp.summary}")
        return EXIT_OK
    try:
        cfg = load_config(args.config, getattr(args, "seed", None))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    if args.command == "validate":
        print(f"ok {cfg.experiment} {cfg.digest}")
        return EXIT_OK
    out = args.out or cfg.output_dir
    try:
        manifest = run(cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    except (ScalimitError, ArithmeticError, ValueError) as exc:
        return _fail(EXIT_NUMERIC, f"numeric error ({type(exc).__name__})", exc)
    for art in manifest["artifacts"]:
        print(f"{art['sha256'][:12]}  {out}/{art['file']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
