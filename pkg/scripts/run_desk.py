"""Run the desk presets of all three problems and write their reports.

    python3 scripts/run_desk.py --out out/desk [--seed 0] [--problems synthetic2d diffusion3d]
"""

import argparse
import logging
import sys
from pathlib import Path

from agp import harness


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="out/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--problems", nargs="+", default=["synthetic2d", "diffusion3d", "poisson4d"])
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    failed = False
    for problem in args.problems:
        cfg = harness.preset(problem, "desk", args.seed)
        out = Path(args.out) / problem
        records = harness.run_experiment(cfg, out, workers=args.workers)
        harness.report(records, out)
        for msg in harness.audit_failures(records):
            print(f"AUDIT FAILURE {msg}", file=sys.stderr)
            failed = True
        print((out / "summary.csv").read_text())
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
