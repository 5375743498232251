"""Command-line front end.

    graphood run <config> [--force] [--jobs N]
    graphood report <results-dir>
    graphood gen-triangles <out-dir> --per-class N --seed S
    graphood validate <config>

Exit codes: 0 success, 1 failed cells (or report/generation errors), 2 config errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .data import generate_triangles_dataset, write_tu_dataset
from .errors import ConfigError, GraphOODError, ReportError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _print_config_errors(exc: ConfigError) -> None:
    print("config error:", file=sys.stderr)
    for e in exc.errors:
        print(f"  {e}", file=sys.stderr)


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
        from .runner import check_datasets

        check_datasets(cfg)
    except ConfigError as exc:
        _print_config_errors(exc)
        return EXIT_CONFIG
    print(f"ok: {len(cfg.datasets)} dataset(s), {len(cfg.methods)} method(s), config hash {cfg.hash()[:12]}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .runner import run_suite

    try:
        cfg = load_config(args.config)
        outcome = run_suite(cfg, force=args.force, jobs=args.jobs)
    except ConfigError as exc:
        _print_config_errors(exc)
        return EXIT_CONFIG
    for c in outcome.cells:
        where = f"{c.dataset}/{c.method}" + (f"/ood_{c.ood_class}" if c.ood_class >= 0 else "")
        print(f"{c.status:7s} {where}" + (f"  ({c.error})" if c.error else ""))
    print(f"results: {outcome.out_dir}")
    if outcome.failed:
        print(f"{len(outcome.failed)} cell(s) failed", file=sys.stderr)
    return outcome.exit_code


def cmd_report(args) -> int:
    from .report import render_report

    try:
        rep = render_report(args.results_dir)
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    for p in rep.files:
        print(p)
    return EXIT_OK


def cmd_gen_triangles(args) -> int:
    try:
        d = generate_triangles_dataset(args.per_class, (args.min_nodes, args.max_nodes), args.seed)
    except GraphOODError as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    path = write_tu_dataset(d, args.out_dir, "TRIANGLES")
    print(f"wrote {len(d)} graphs to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphood", description="Graph OOD detection experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress of every split")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a suite config (a run manifest also works)")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="recompute cached cells")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render tables and heatmaps from a result directory")
    p.add_argument("results_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-triangles", help="write a generated TRIANGLES dataset in TU format")
    p.add_argument("out_dir")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-nodes", type=int, default=10)
    p.add_argument("--max-nodes", type=int, default=30)
    p.set_defaults(func=cmd_gen_triangles)

    p = sub.add_parser("validate", help="check a config without running anything")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
