"""
Command-line entry point of the AMP Laboratory
Loads a JSON experiment config, runs the selected stage plan over every (n, seed)
cell and reports where the artifacts went
"""

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from state import STAGE_PLANS, ExperimentConfig
from utils.logger import get_logger, setup_logging

load_dotenv()

logger = get_logger("main")

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_INVALID_CONFIG = 2


class ConfigError(Exception):
    """Config file could not be read or validated; the message is ready for the user"""


def parse_seeds(text: str) -> List[int]:
    """'0,1,2' or '0-4' (inclusive) or a mix of both"""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            start, stop = (int(value) for value in part.split("-", 1))
            seeds.extend(range(start, stop + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _key_line(text: str, loc: Sequence) -> Optional[int]:
    """Line of the deepest named key of a validation error location"""
    keys = [part for part in loc if isinstance(part, str)]
    lines = text.splitlines()
    for key in reversed(keys):
        needle = f'"{key}"'
        for number, line in enumerate(lines, start=1):
            if needle in line:
                return number
    return None


def format_validation_error(path: Path, text: str, error: ValidationError) -> str:
    messages = []
    for item in error.errors():
        field = ".".join(str(part) for part in item["loc"]) or "<root>"
        line = _key_line(text, item["loc"])
        where = f"{path}:{line}" if line else str(path)
        messages.append(f"{where}: {field}: {item['msg']}")
    return "\n".join(messages)


def load_config(path: Path, seeds: Optional[List[int]] = None) -> ExperimentConfig:
    """
    Read and validate a config file

    Raises:
        ConfigError: unreadable file, malformed JSON or a field failing validation
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from e
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    if seeds is not None and isinstance(payload, dict):
        payload["seeds"] = seeds
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(format_validation_error(path, text, e)) from e


class AmpLabCli:
    """Argument parsing and experiment dispatch"""

    def __init__(self):
        self.parser = self.build_parser()

    @staticmethod
    def build_parser() -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="amplab",
            description="Seeded AMP / density evolution experiments with CSV and MANIFEST output",
        )
        parser.add_argument("command", nargs="?", choices=sorted(STAGE_PLANS),
                            help="stage plan to run (same as --stage)")
        parser.add_argument("--stage", choices=sorted(STAGE_PLANS), default=None,
                            help="stage plan to run (default: full)")
        parser.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        parser.add_argument("--out", type=Path, default=None,
                            help="output directory (default: AMPLAB_OUTPUT_DIR or the config's)")
        parser.add_argument("--seeds", type=parse_seeds, default=None,
                            help="seed list overriding the config, e.g. 0,1,2 or 0-4")
        parser.add_argument("--workers", type=int, default=int(os.getenv("AMPLAB_WORKERS", "1")),
                            help="cells run concurrently (default: AMPLAB_WORKERS or 1)")
        parser.add_argument("--log-level", default=None,
                            choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
        parser.add_argument("--log-file", default=None)
        return parser

    def resolve_plan(self, args: argparse.Namespace) -> str:
        if args.command and args.stage and args.command != args.stage:
            self.parser.error(f"subcommand '{args.command}' conflicts with --stage {args.stage}")
        return args.command or args.stage or "full"

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        setup_logging(log_level=args.log_level, log_file=args.log_file)
        plan = self.resolve_plan(args)

        try:
            config = load_config(args.config, args.seeds)
        except ConfigError as e:
            print(f"Invalid config:\n{e}", file=sys.stderr)
            return EXIT_INVALID_CONFIG

        out = args.out or os.getenv("AMPLAB_OUTPUT_DIR") or config.output_dir

        # deferred so that a bad config is reported without building the graph
        from graph import ExperimentGraph

        graph = ExperimentGraph()
        summary = asyncio.run(graph.run_experiment(config, plan=plan, output_dir=str(out),
                                                   workers=args.workers))

        if summary["status"] == "failed":
            logger.error(f"Experiment {config.experiment_id} failed in stage "
                         f"'{summary['failed_stage']}'; partial artifacts in {out}")
            return EXIT_STAGE_FAILED

        logger.info(f"Experiment {config.experiment_id} ({plan}) completed; "
                    f"manifest at {summary['manifest']}")
        return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    return AmpLabCli().run(argv)


if __name__ == "__main__":
    sys.exit(main())
