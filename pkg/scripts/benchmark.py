"""Epoch timings (naive vs trick) and amortized evaluation for the affine configs.

    python scripts/benchmark.py --out runs/bench
"""

import argparse
from pathlib import Path

from flowkac.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", default=["gbm1d", "ou2d", "gbm2d"])
    ap.add_argument("--out", default="runs/bench")
    args = ap.parse_args()
    for name in args.names:
        print(f"== {name}")
        main(["benchmark", "--config", str(CONFIGS / f"{name}.cfg"), "--out", str(Path(args.out) / name)])
