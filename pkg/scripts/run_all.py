"""Run every config in configs/ into results/<name>/ and print a summary line per run.

Usage: python scripts/run_all.py [--only NAME ...] [--seed N]
"""
import argparse
import pathlib
import sys
import time

from scalimit.cli import main as cli

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--only", nargs="*", help="config stems to run (default: all)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=str(ROOT / "results"))
    args = p.parse_args()
    worst = 0
    for cfg in sorted((ROOT / "configs").glob("*.json")):
        if args.only and cfg.stem not in args.only:
            continue
        argv = ["run", str(cfg), "--out", f"{args.out}/{cfg.stem}"]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        t0 = time.perf_counter()
        code = cli(argv)
        print(f"== {cfg.stem}: exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
