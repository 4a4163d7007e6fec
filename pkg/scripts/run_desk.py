"""Train and evaluate shipped configs through the CLI.

    python scripts/run_desk.py gbm1d ou2d --out runs
"""

import argparse
import sys
from pathlib import Path

from flowkac.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(name: str, out: Path, seed: int | None) -> int:
    cfg = CONFIGS / f"{name}.cfg"
    target = out / name
    extra = [] if seed is None else ["--seed", str(seed)]
    status = main(["train", "--config", str(cfg), "--out", str(target), *extra])
    if status:
        return status
    return main(["eval", "--config", str(cfg), "--out", str(target),
                 "--checkpoint", str(target / "model.tnf"), *extra])


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="+", help="config stems under configs/")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    for name in args.names:
        code = run(name, Path(args.out), args.seed)
        if code:
            sys.exit(code)
