"""Full-scale experiment of one problem (hours of CPU time on one core).

    python3 scripts/run_paper.py synthetic2d --out out/paper --workers 8

Finished runs are kept under ``<out>/<problem>/runs`` and skipped on restart.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from agp import harness


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("problem", choices=sorted(harness._PAPER_SETUPS))
    p.add_argument("--out", default="out/paper")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--exponents", type=float, nargs="+", help="subset of work exponents")
    p.add_argument("--strategies", nargs="+", choices=harness.STRATEGIES)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = harness.preset(args.problem, "paper", args.seed)
    if args.exponents:
        cfg = dataclasses.replace(cfg, exponents=tuple(args.exponents))
    if args.strategies:
        cfg = dataclasses.replace(cfg, strategies=tuple(args.strategies))
    out = Path(args.out) / args.problem
    records = harness.run_experiment(cfg, out, workers=args.workers)
    harness.report(records, out)
    failures = harness.audit_failures(records)
    for msg in failures:
        print(f"AUDIT FAILURE {msg}", file=sys.stderr)
    print((out / "summary.csv").read_text())
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
