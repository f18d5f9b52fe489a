"""``mvvc`` command-line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import load_config
from .errors import ConfigError, FormatError, InsufficientDataError, MissingArtifactError, NumericalError
from .pipeline import STAGES, Workspace, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvvc", description="Multi-view volumetric water classification pipeline.")
    p.add_argument("command", choices=STAGES + ("all",), help="stage to run ('all' runs every stage in order)")
    p.add_argument("--config", help="JSON config file; omitted keys take their defaults")
    p.add_argument("--out", help="output directory (overrides the config's 'out')")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    p.add_argument("--cameras", type=int, help="synth only: number of cameras")
    p.add_argument("--force", action="store_true", help="rerun even when outputs are fresh")
    return p


def _setup_logging() -> None:
    level = os.environ.get("MVVC_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    log = logging.getLogger("mvvc")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.cameras is not None:
            if args.command not in ("synth", "all"):
                raise ConfigError("--cameras only applies to synth")
            if args.cameras < 2:
                raise ConfigError("--cameras must be >= 2")
            cfg = dataclasses.replace(cfg, render=dataclasses.replace(cfg.render, n_cameras=args.cameras))
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        ws = Workspace(args.out or cfg.out, cfg, args.threads)
        stages = STAGES if args.command == "all" else (args.command,)
        for stage in stages:
            run_stage(stage, ws, force=args.force)
        if args.command in ("eval", "all"):
            print(ws.path("eval_report.txt").read_text(), end="")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (NumericalError, FormatError, InsufficientDataError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERICAL if isinstance(exc, NumericalError) else 1
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
