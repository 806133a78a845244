"""Write the CSV data behind the five figures into a directory.

    python3 scripts/reproduce_figures.py [OUT_DIR] [--nx N] [--seed S]
"""

import argparse
import sys
import time
from pathlib import Path

from hmmdiv.cli import load_config, reproduce_figures


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", nargs="?", default="figures")
    ap.add_argument("--nx", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(overrides={"n_x": args.nx, "seed": args.seed})
    t0 = time.perf_counter()
    for path in reproduce_figures(cfg, out):
        print(path)
    print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)


if __name__ == "__main__":
    main()
