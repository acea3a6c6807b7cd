"""Print the allocation-probability and SE-ratio curves as plain text tables.

Panel A: probability that a subgroup's realized share in each arm is within a
relative distance c of its population share, one block per subgroup size.
Panel B: ratio of the standard error at actual subgroup sizes to the one at
expected sizes, across realized treated counts. The CSVs come from
``dbsubgroup probe``.
"""

import argparse
import csv
import sys
from pathlib import Path

from dbsubgroup.cli import main

ROOT = Path(__file__).resolve().parent.parent


def show(path: Path, every: int):
    with path.open() as fh:
        rows = list(csv.reader(fh))
    print(path.name)
    print("  " + "  ".join(rows[0]))
    for row in rows[1::every]:
        print("  " + "  ".join(row))


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "probe.toml"))
    ap.add_argument("--out", default=str(ROOT / "out" / "probe"))
    ap.add_argument("--every", type=int, default=5, help="print every n-th grid row")
    args = ap.parse_args()
    code = main(["probe", "--config", args.config, "--out", args.out])
    if code == 0:
        for name in ("panel_a.csv", "panel_b.csv"):
            show(Path(args.out) / name, args.every)
    sys.exit(code)
