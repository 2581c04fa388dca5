"""Command-line entry point.

Subcommands map one-to-one onto the stage chain plus the layer ablation.
Exit codes: 0 success, 1 runtime/config error, 2 usage error, 3 missing
input artifact.  Logging verbosity comes from XMTS_LOG (error|info|debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .autodiff import XmtsError
from .config import ConfigError, resolve_config
from .stages import STAGE_FUNCS, DependencyError, run_stage

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3


def _setup_logging() -> None:
    level = os.environ.get("XMTS_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        print(f"xmts: warning: unknown XMTS_LOG value {level!r}; using info",
              file=sys.stderr)
        level = "info"
    logging.basicConfig(level=levels[level],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmts",
        description="Cross-modal teacher-student SLU experiments, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_FUNCS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, metavar="PATH",
                       help="INI experiment config (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="overrides", help="override a config key (repeatable)")
        p.add_argument("--out", required=True, metavar="DIR",
                       help="run directory for artifacts and metrics")
        p.add_argument("--seed", type=int, default=None,
                       help="shortcut for --set run.seed=N")
        p.add_argument("--force", action="store_true",
                       help="redo the stage even if the manifest marks it complete")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    try:
        cfg = resolve_config(args.config, overrides)
        outputs = run_stage(args.command, cfg, args.out, force=args.force)
    except DependencyError as err:
        print(f"xmts: dependency error: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigError, XmtsError) as err:
        print(f"xmts: error: {err}", file=sys.stderr)
        return EXIT_ERROR
    for key, value in outputs.items():
        print(f"{args.command}: {key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
