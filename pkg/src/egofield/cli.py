"""Command-line entry point: ``egofield <stage> [--config F] [--out D] [--seed N]``.

On failure a single line goes to stderr::

    egofield: error stage=<stage> code=<code> msg=<message>

and the exit code is 2 for usage/config problems, 1 for stage failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from egofield.config import ConfigError, load_config
from egofield.parallel import thread_count
from egofield.pipeline import STAGES, Pipeline, StageError


def _fail(stage: str, code: str, msg: str, status: int) -> int:
    msg = " ".join(str(msg).split())
    print(f"egofield: error stage={stage} code={code} msg={msg}", file=sys.stderr)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egofield", description="Run the egocentric language-field pipeline.")
    p.add_argument("stage", choices=[*STAGES, "all"], help="stage to run ('all' chains every stage)")
    p.add_argument("--config", help="pipeline INI file (default: bundled default.ini)")
    p.add_argument("--out", default="runs/default", help="artifact directory (default: runs/default)")
    p.add_argument("--seed", type=int, help="override the config's global seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        thread_count()
        cfg = load_config(args.config, seed=args.seed)
    except (ConfigError, ValueError) as exc:
        return _fail(args.stage, "config", exc, 2)
    try:
        Pipeline(cfg, args.out).run(args.stage)
    except StageError as exc:
        return _fail(args.stage, exc.code, exc, 1)
    except FileNotFoundError as exc:
        return _fail(args.stage, "missing-input", exc, 1)
    except (ValueError, RuntimeError, KeyError) as exc:
        return _fail(args.stage, type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
