"""Run one config twice and compare every artifact byte for byte (timing.json excluded).

Usage: python scripts/check_determinism.py configs/figure2.json
"""
import filecmp
import pathlib
import sys
import tempfile

from scalimit.cli import main as cli


def main(cfg: str) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        outs = [pathlib.Path(tmp, r) for r in "ab"]
        for out in outs:
            code = cli(["run", cfg, "--out", str(out)])
            if code:
                return code
        names = sorted(f.name for f in outs[0].iterdir() if f.name != "timing.json")
        _, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], names, shallow=False)
        for name in names:
            print(f"{'DIFFER' if name in mismatch + errors else 'same  '}  {name}")
        return 1 if mismatch or errors else 0


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    sys.exit(main(sys.argv[1]))
