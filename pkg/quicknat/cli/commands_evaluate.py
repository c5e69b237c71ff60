import argparse
from pathlib import Path

from quicknat.cli.deps import CommandRouter, out_dir_of
from quicknat.core.exceptions import UsageError
from quicknat.core.logging import get_logger
from quicknat.models.volumes import LabelSpace
from quicknat.services.metrics_service import (
    build_report,
    consistency_report,
    mean_dice,
    write_report_csv,
    write_report_json,
)
from quicknat.services.volume_service import read_label_volume, remap_labels

logger = get_logger(__name__)

router = CommandRouter()


def _label_space_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--label-space", default="quicknat", choices=["quicknat", "phantom"])
    parser.add_argument("--classes", type=int, default=None, help="class count of a phantom label space")


def _label_space(args: argparse.Namespace) -> LabelSpace:
    try:
        return LabelSpace.by_name(args.label_space, args.classes)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _configure_evaluate(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("pred", type=Path, help="predicted label volume")
    parser.add_argument("truth", type=Path, help="reference label volume")
    parser.add_argument("--scheme", default="quicknat", choices=["quicknat", "freesurfer", "manual"],
                        help="id scheme of the reference volume")
    parser.add_argument("--subject", default=None, help="subject id written to the report")
    _label_space_flags(parser)


def _configure_consistency(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("run_a", type=Path, help="segmentation of the first scan")
    parser.add_argument("run_b", type=Path, help="segmentation of the rescan")
    _label_space_flags(parser)


@router.command("evaluate", "Dice and volume agreement of a segmentation against a reference", _configure_evaluate)
def evaluate(args: argparse.Namespace) -> int:
    space = _label_space(args)
    pred = read_label_volume(args.pred)
    truth = read_label_volume(args.truth)
    if space.name == "quicknat":
        truth = remap_labels(truth, args.scheme)
    elif args.scheme != "quicknat":
        raise UsageError("--scheme applies to the quicknat label space only")
    subject = args.subject or args.pred.name.removesuffix(".nii")
    report = build_report(pred, truth, space, subject)

    out = out_dir_of(args)
    csv_path = write_report_csv(report, out / f"{subject}_metrics.csv")
    write_report_json(report, out / f"{subject}_metrics.json")
    logger.info("[evaluate] subject=%s structures=%d out=%s", subject, len(report.rows), out)
    if report.rows:
        mean, _ = mean_dice(report)
        print(f"{subject}: mean dice {mean:.4f} over {len(report.rows)} structures -> {csv_path}")
    else:
        print(f"{subject}: no foreground structures -> {csv_path}")
    return 0


@router.command("consistency", "Per-structure volume distance between two segmentations", _configure_consistency)
def consistency(args: argparse.Namespace) -> int:
    space = _label_space(args)
    a = read_label_volume(args.run_a)
    b = read_label_volume(args.run_b)
    distances = consistency_report(a, b, space, spacing=a.spacing)
    print("structure,volume_distance")
    for structure, d in distances.items():
        print(f"{structure},{d:.6f}")
    return 0
