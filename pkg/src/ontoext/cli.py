"""Command-line entry point.

Exit codes: 0 success, 1 some notes/entities failed, 2 configuration or
stage-ordering error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .ontology import OntologyError
from .pipeline import STAGES, ConfigError, StageOrderError, load_config, report, run_all, run_stage, format_report

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ontoext", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "report", "run-all"):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="TOML config file")
        p.add_argument("--notes", help="note directory or JSONL file")
        p.add_argument("--ontology", help="seed ontology (OBO)")
        p.add_argument("--output", help="output directory")
        p.add_argument("--workers", type=int)
        p.add_argument("--scripted-only", action="store_true", default=None,
                       help="refuse any provider that is not scripted")
        if name != "report":
            p.add_argument("--force", action="store_true", help="rerun even if inputs are unchanged")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {
        "notes": args.notes,
        "ontology": args.ontology,
        "output": args.output,
        "workers": args.workers,
        "scripted_only": args.scripted_only,
    }
    try:
        config = load_config(args.config, overrides)
        if args.command == "report":
            doc = report(config)
            sys.stdout.write(format_report(doc))
            return EXIT_OK
        if args.command == "run-all":
            manifests = run_all(config, force=args.force)
        else:
            manifests = [run_stage(config, args.command, force=args.force)]
    except (ConfigError, StageOrderError, OntologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    partial = False
    for m in manifests:
        note = " (unchanged, skipped)" if m.skipped else ""
        failed = m.failed
        print(f"{m.stage}: {m.status}{note}, {len(m.items) - len(failed)}/{len(m.items)} ok")
        partial |= m.status != "complete"
    return EXIT_PARTIAL if partial else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
