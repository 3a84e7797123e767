"""
Command-line front end:

    python src/main.py <subcommand> --config configs/default.json --out out/
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from scatrel.api.commands import COMMANDS
from scatrel.api.export import config_sha256
from scatrel.api.models import RunConfig, load_config
from scatrel.core.errors import ScatrelError
from scatrel.lifecycle import RunContext, configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="scatrel", description="Classical scattering relation and semiclassical amplitude toolkit."
    )
    parser.add_argument("subcommand", choices=list(COMMANDS.keys()), help="What to run")
    parser.add_argument("--config", type=Path, default=None, help="JSON run configuration (defaults when omitted)")
    parser.add_argument("--out", type=Path, default=None, help="Output directory (overrides the config)")
    parser.add_argument("--threads", type=int, default=None, help="Worker count, -1 for all cores")
    parser.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--plot", action="store_true", help="Also write convergence figures (PNG)")
    parser.add_argument("--quick", action="store_true", help="verify: reduced problem sizes")
    return parser.parse_args(argv)


def _resolve(args: argparse.Namespace) -> tuple[RunConfig, RunContext]:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    updates = {}
    if args.out is not None:
        updates["out"] = str(args.out)
    if args.threads is not None:
        updates["threads"] = args.threads
    if updates:
        cfg = RunConfig.model_validate({**cfg.model_dump(by_alias=True), **updates})
    ctx = RunContext(
        out_dir=Path(cfg.out),
        config_hash=config_sha256(cfg),
        threads=cfg.threads,
        plot=args.plot,
        quick=args.quick,
        base_dir=args.config.parent if args.config is not None else None,
        seed=cfg.seed,
    )
    return cfg, ctx


def exit_status(exc: ScatrelError) -> int:
    """Input errors map to 2, numerical failures to 3.

    Anything that is not a ScatrelError is left to propagate, so the
    interpreter exits with status 1 and a traceback.
    """
    return EXIT_NUMERICAL if isinstance(exc, RuntimeError) else EXIT_INPUT


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.log_level)
    where = args.config if args.config is not None else "<defaults>"
    try:
        cfg, ctx = _resolve(args)
        if args.subcommand == "verify":
            print(json.dumps(cfg.model_dump(mode="json", by_alias=True), sort_keys=True, indent=2))
        logger.info(f"Running '{args.subcommand}' with config {where} (sha256 {ctx.config_hash[:12]})")
        summary = COMMANDS[args.subcommand](cfg, ctx)
    except ScatrelError as exc:
        logger.error(f"{args.subcommand} failed for config {where}: {type(exc).__name__}: {exc}")
        return exit_status(exc)
    logger.info(f"'{args.subcommand}' done, artifacts: {summary.get('artifacts', [])}")
    if args.subcommand == "verify":
        return EXIT_OK if summary.get("passed") else EXIT_NUMERICAL
    return EXIT_OK
