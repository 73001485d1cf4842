"""``torus-macrospec`` command line.

Thread environment variables are set before the numerical stack is
imported, so ``--threads`` governs BLAS and numba pools.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="torus-macrospec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the pipeline for a TOML config")
    r.add_argument("config")
    r.add_argument("--force", action="store_true", help="recompute stages even if up to date")
    r.add_argument("--stages", help="comma-separated stages (dependencies are added)")
    r.add_argument("--out", help="output directory (overrides [run] output)")
    r.add_argument("--threads", type=int, default=1)
    a = sub.add_parser("audit", help="recompute the flatness audit from a run directory")
    a.add_argument("dir")
    pl = sub.add_parser("plot", help="write SVG plots for a run directory")
    pl.add_argument("dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    if args.command == "run":
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    from . import harness_cli as h

    if args.command == "run":
        try:
            cfg = h.load_config(args.config)
            if args.stages:
                import dataclasses

                cfg = dataclasses.replace(cfg, stages=h.stage_closure(s.strip() for s in args.stages.split(",") if s.strip()))
            result = h.run(cfg, out=args.out, force=args.force)
        except h.ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return h.EXIT_CONFIG
        for stage, st in result.status.items():
            print(f"{stage:12s} {st}")
        audit = result.report.get("verdicts", {}).get("audit")
        if audit:
            print(f"audit: {audit['verdict']}")
        print(f"report: {result.out / 'report.json'}")
        return result.exit_code
    if args.command == "audit":
        from pathlib import Path

        if not Path(args.dir).is_dir():
            print(f"error: no such run directory: {args.dir}", file=sys.stderr)
            return h.EXIT_CONFIG
        verdict = h.audit_directory(args.dir)
        print(h.dumps(verdict), end="")
        return h.EXIT_INCONCLUSIVE if verdict["verdict"] == "inconclusive" else h.EXIT_OK
    if args.command == "plot":
        for path in h.emit_plots(args.dir):
            print(path)
        return h.EXIT_OK
    return h.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
