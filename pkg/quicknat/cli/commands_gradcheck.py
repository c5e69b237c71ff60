import argparse

from quicknat.cli.deps import CommandRouter, exit_code, seed_of
from quicknat.core.logging import get_logger
from quicknat.services.diagnostics_service import run_gradient_suite, suite_table

logger = get_logger(__name__)

router = CommandRouter()


def _configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sample", type=int, default=12, help="entries probed per parameter tensor")


@router.command("gradcheck", "Finite-difference check of every differentiable op and the network", _configure)
def gradcheck(args: argparse.Namespace) -> int:
    reports = run_gradient_suite(seed=seed_of(args), sample=args.sample)
    print(suite_table(reports))
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error("[gradcheck] failed: %s", ", ".join(failed))
    return exit_code(not failed)
