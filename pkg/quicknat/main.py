import sys
from typing import List, Optional

from quicknat.cli import (
    commands_evaluate,
    commands_gradcheck,
    commands_phantom,
    commands_segment,
    commands_train,
)
from quicknat.cli.deps import CommandRouter, QuickNATArgumentParser, common_flags
from quicknat.core.config import settings
from quicknat.core.exceptions import QuickNATError
from quicknat.core.logging import configure_logging, get_logger

logger = get_logger(__name__)

ROUTERS: List[CommandRouter] = [
    commands_phantom.router,
    commands_train.router,
    commands_segment.router,
    commands_evaluate.router,
    commands_gradcheck.router,
]


def build_parser() -> QuickNATArgumentParser:
    parser = QuickNATArgumentParser(
        prog="quicknat",
        description=settings.PROJECT_NAME,
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=QuickNATArgumentParser)
    subparsers.required = True
    parents = [common_flags()]
    for router in ROUTERS:
        for command in router.commands:
            sub = subparsers.add_parser(command.name, help=command.summary, description=command.summary, parents=parents)
            if command.configure is not None:
                command.configure(sub)
            sub.set_defaults(handler=command.handler)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        logger.debug("[cli] command=%s", args.command)
        return int(args.handler(args))
    except QuickNATError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return int(e.exit_code)


cli = main

if __name__ == "__main__":
    sys.exit(main())
