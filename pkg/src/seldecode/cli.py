"""Command-line frontend: one subcommand per pipeline stage plus ``run`` and ``report``.

Exit codes: 0 success, 1 invalid config, 2 missing or stale stage artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, ArtifactError, emit_report, run_pipeline, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file layered over the packaged defaults")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seldecode", description="Selection-based collaborative decoding experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run the {stage} stage"))
    p = sub.add_parser("run", help="run one stage by name, or every stage in order")
    _common(p)
    p.add_argument("--stage", default="all", choices=("all",) + STAGES)
    p = sub.add_parser("report", help="rebuild report files from an evaluated run directory")
    p.add_argument("--out", default="run")
    sub.add_parser("defaults", help="print the default config")
    return ap


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["run.seed"] = str(args.seed)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected SECTION.KEY=VALUE")
        out[key.strip()] = value.strip()
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "defaults":
        from .config import default_text

        sys.stdout.write(default_text())
        return EXIT_OK
    try:
        if args.command == "report":
            print(emit_report(args.out))
            return EXIT_OK
        config = load_config(args.config, _overrides(args))
        stage = args.stage if args.command == "run" else args.command
        if stage == "all":
            run_pipeline(config, args.out)
        else:
            run_stage(config, args.out, stage)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
