"""Run the main Monte Carlo grid (or any simulate config).

    python3 scripts/run_main_grid.py [--config configs/main_grid.toml] [--out out/main_grid] [--threads N]
"""

import argparse
import sys
from pathlib import Path

from dbsubgroup.cli import main

ROOT = Path(__file__).resolve().parent.parent


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "main_grid.toml"))
    ap.add_argument("--out", default=str(ROOT / "out" / "main_grid"))
    ap.add_argument("--threads", default="0", help="worker processes (0 = one per CPU)")
    return ap.parse_args(argv)


if __name__ == "__main__":
    args = parse_args()
    sys.exit(main(["simulate", "--config", args.config, "--out", args.out,
                   "--threads", args.threads]))
