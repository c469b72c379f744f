"""Print final-iteration medians and design sizes from a report directory.

    python3 scripts/summarize.py out/desk/synthetic2d
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print(__doc__, file=sys.stderr)
        return 2
    rows = list(csv.DictReader(open(Path(argv[0]) / "convergence.csv")))
    last = max(int(r["iteration"]) for r in rows)
    groups = defaultdict(list)
    for r in rows:
        if int(r["iteration"]) == last:
            groups[r["strategy"], r["error_kind"], r["exponent"]].append(r)
    print(f"{'strategy':10s} {'kind':4s} {'q':>4s} {'runs':>4s} {'med KL':>9s} {'med L2':>10s} {'size':>6s}")
    for (s, k, q), rs in sorted(groups.items()):
        kl = np.median([float(r["metric_kl"]) for r in rs])
        l2 = np.median([float(r["metric_l2"]) for r in rs])
        size = np.mean([float(r["design_size"]) for r in rs])
        print(f"{s:10s} {k:4s} {q:>4s} {len(rs):4d} {kl:9.4g} {l2:10.4g} {size:6.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
