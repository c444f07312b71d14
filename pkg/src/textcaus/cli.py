"""``textcaus`` command line.

Analytic parameters live in the YAML run configuration; flags only choose
paths, thread counts and verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load
from .match import InfeasibleMatchError, SeparationError
from .pipeline import STAGES, DataError, Run, StageExistsError, run_pipeline, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "TEXTCAUS_OUTPUT_ROOT"

log = logging.getLogger("textcaus")


def _run_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.output_dir:
        return cfg.resolve(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, "textcaus_runs")
    return Path(root) / Path(args.config).stem


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textcaus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", *STAGES, "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True, help="YAML run configuration")
        p.add_argument("--out", "-o", help=f"run directory (default: config output_dir, else ${OUTPUT_ROOT_ENV}/<config name>)")
        p.add_argument("--threads", type=int, default=1, help="worker bound; results do not depend on it")
        p.add_argument("--overwrite", action="store_true", help="replace existing stage outputs")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load(args.config)
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        run = Run(cfg, _run_dir(args, cfg), threads=args.threads, overwrite=args.overwrite)
        log.info("run directory %s", run.root)
        if args.command == "pipeline":
            run_pipeline(run)
        else:
            run_stage(run, args.command)
    except (ConfigError, StageExistsError) as exc:
        print(f"textcaus: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleMatchError, SeparationError) as exc:
        print(f"textcaus: infeasible analysis: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, ValueError, OSError) as exc:
        print(f"textcaus: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
