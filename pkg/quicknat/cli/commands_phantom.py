import argparse

from quicknat.cli.deps import CommandRouter, out_dir_of, seed_of
from quicknat.core.exceptions import UsageError
from quicknat.core.logging import get_logger
from quicknat.models.volumes import PhantomSpec
from quicknat.services.phantom_service import phantom_cohort
from quicknat.services.volume_service import write_volume

logger = get_logger(__name__)

router = CommandRouter()


def _configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--count", type=int, default=1, help="number of phantoms")
    parser.add_argument("--grid", type=int, default=64, help="grid size per axis")
    parser.add_argument("--classes", type=int, default=6, help="class count including background (4-6)")
    parser.add_argument("--noise", type=float, default=0.05, help="intensity noise SD")
    parser.add_argument("--corruption", type=float, default=0.0, help="auxiliary-label corruption rate")


@router.command("phantom", "Generate synthetic phantoms (image, labels, optional auxiliary labels)", _configure)
def generate(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    try:
        spec = PhantomSpec(grid_size=args.grid, num_classes=args.classes, noise_sd=args.noise)
    except ValueError as e:
        raise UsageError(f"invalid phantom settings: {e}") from e
    out = out_dir_of(args)
    cases = phantom_cohort(args.count, seed=seed_of(args), corruption_rate=args.corruption, spec=spec)
    for i, case in enumerate(cases):
        write_volume(case.intensity, out / f"phantom{i:03d}_image.nii")
        write_volume(case.labels, out / f"phantom{i:03d}_labels.nii")
        if args.corruption:
            write_volume(case.aux_labels, out / f"phantom{i:03d}_aux.nii")
    logger.info("[phantom] wrote %d phantoms to %s", len(cases), out)
    print(out)
    return 0
