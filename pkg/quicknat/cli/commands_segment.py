import argparse
from pathlib import Path

from quicknat.cli.deps import CommandRouter, out_dir_of, views_of, weights_of
from quicknat.core.config import settings
from quicknat.core.exceptions import DataError
from quicknat.core.logging import get_logger
from quicknat.services.checkpoint_service import load_checkpoint
from quicknat.services.multiview_service import segment_volume
from quicknat.services.volume_service import read_volume, write_volume

logger = get_logger(__name__)

router = CommandRouter()


def _configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("image", type=Path, help="conformed NIfTI-1 intensity volume")
    parser.add_argument("--checkpoints", type=Path, required=True, help="directory with <stage>_<view> checkpoints")
    parser.add_argument("--stage", default="finetune", help="checkpoint stage prefix")
    parser.add_argument("--concurrent", action="store_true", help="run the view networks in parallel threads")


@router.command("segment", "Segment a volume with the view networks and aggregate their probabilities", _configure)
def segment(args: argparse.Namespace) -> int:
    checkpoints = [
        load_checkpoint(args.checkpoints / f"{args.stage}_{view.value}{settings.CHECKPOINT_SUFFIX}")
        for view in views_of(args)
    ]
    space = checkpoints[0].label_space
    logger.info("[segment] %d view networks from %s stage=%s", len(checkpoints), args.checkpoints, args.stage)
    if any(c.label_space != space for c in checkpoints[1:]):
        raise DataError("checkpoints disagree on their label space")
    volume = read_volume(args.image)
    labels = segment_volume(
        [c.network for c in checkpoints], volume, space, weights_of(args), concurrent=args.concurrent
    )
    stem = args.image.name.removesuffix(".nii")
    path = write_volume(labels, out_dir_of(args) / f"{stem}_seg.nii")
    print(path)
    return 0
