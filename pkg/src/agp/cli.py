"""Command line entry point: ``agp run | report | verify``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness, verification


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config, args.preset, args.seed)
    out = args.out or f"out/{cfg.problem}_{cfg.preset}_seed{cfg.seed}"
    records = harness.run_experiment(cfg, out, workers=args.workers)
    harness.report(records, out)
    failures = harness.audit_failures(records)
    for msg in failures:
        print(f"AUDIT FAILURE {msg}", file=sys.stderr)
    print(f"{len(records)} runs written to {out}")
    return 1 if failures else 0


def _cmd_report(args) -> int:
    records = harness.load_records(args.inp)
    if not records:
        print(f"no run records under {args.inp}", file=sys.stderr)
        return 2
    for name, path in harness.report(records, args.out).items():
        print(f"{name}: {path}")
    failures = harness.audit_failures(records)
    for msg in failures:
        print(f"AUDIT FAILURE {msg}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_verify(args) -> int:
    ok = True
    for res in verification.run_all(quick=args.quick):
        print(res.line(), flush=True)
        ok &= res.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment and write records plus CSV reports")
    r.add_argument("--config", required=True, help="JSON experiment config")
    r.add_argument("--preset", choices=["desk", "paper"], default=None)
    r.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--workers", type=int, default=1, help="parallel runs")
    r.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="rebuild CSV reports from run records")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=_cmd_report)

    v = sub.add_parser("verify", help="run the randomized oracle checks")
    v.add_argument("--quick", action="store_true", help="fewer instances")
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
