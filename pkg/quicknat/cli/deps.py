"""Shared pieces of the command line: parser class, command routers, common flags."""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

from pydantic import ValidationError

from quicknat.core.config import load_run_config, settings
from quicknat.core.exceptions import ExitCode, UsageError
from quicknat.models.training import RunConfig
from quicknat.models.volumes import AggregationWeights, View

Handler = Callable[[argparse.Namespace], int]
Configure = Callable[[argparse.ArgumentParser], None]


class QuickNATArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message: str):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


@dataclass
class Command:
    name: str
    summary: str
    handler: Handler
    configure: Optional[Configure] = None


@dataclass
class CommandRouter:
    commands: List[Command] = field(default_factory=list)

    def command(self, name: str, summary: str, configure: Optional[Configure] = None):
        def decorator(handler: Handler) -> Handler:
            self.commands.append(Command(name, summary, handler, configure))
            return handler

        return decorator


def common_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="key = value run config file")
    parent.add_argument("--seed", type=int, default=None, help="random seed")
    parent.add_argument("--views", default=None, help="comma list of coronal,axial,sagittal")
    parent.add_argument("--lambda", dest="weights", default=None, help="aggregation weights axial,coronal,sagittal")
    parent.add_argument("--out", type=Path, default=None, help="output directory")
    return parent


def run_config(args: argparse.Namespace, **defaults) -> RunConfig:
    """Config file (if any) overlaid with the command-line flags."""
    overrides = {"seed": args.seed, "views": args.views}
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if args.config is not None:
        return load_run_config(args.config, defaults, **overrides)
    try:
        return RunConfig.model_validate({**defaults, **{k: v for k, v in overrides.items() if v is not None}})
    except ValidationError as e:
        raise UsageError(f"invalid arguments: {e}") from e


def seed_of(args: argparse.Namespace) -> int:
    return settings.DEFAULT_SEED if args.seed is None else args.seed


def views_of(args: argparse.Namespace) -> List[View]:
    if args.views is None:
        return [View.CORONAL, View.AXIAL, View.SAGITTAL]
    try:
        return View.parse_list(args.views)
    except ValueError as e:
        raise UsageError(f"--views: {e}") from e


def weights_of(args: argparse.Namespace) -> AggregationWeights:
    try:
        if args.weights is None:
            return AggregationWeights.from_list(settings.view_weights_list)
        return AggregationWeights.from_list([float(w) for w in args.weights.split(",") if w.strip()])
    except (ValueError, ValidationError) as e:
        raise UsageError(f"--lambda: {e}") from e


def out_dir_of(args: argparse.Namespace) -> Path:
    path = Path(args.out or settings.OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def exit_code(ok: bool) -> int:
    return int(ExitCode.OK if ok else ExitCode.NUMERICAL)
