import argparse
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from quicknat.cli.deps import CommandRouter, run_config
from quicknat.core.config import dump_run_config, settings
from quicknat.core.exceptions import DataError, UsageError
from quicknat.core.logging import get_logger
from quicknat.db.storage import atomic_write_text
from quicknat.models.network import NetworkPreset
from quicknat.models.training import RunConfig
from quicknat.services.checkpoint_service import load_checkpoint
from quicknat.services.network_service import ViewNetwork, init_params
from quicknat.services.trainer_service import TrainingData, train_stage, write_history_csv
from quicknat.services.volume_service import read_label_volume, read_volume

logger = get_logger(__name__)

router = CommandRouter()


def load_pairs(directory: Optional[str], label_suffix: str, role: str) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(image, labels) arrays for every `<case>_image.nii` with a `<case>_<suffix>.nii` partner."""
    if directory is None:
        raise UsageError(f"{role}_dir is required")
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"{role} directory not found: {root}")
    pairs = []
    for image_path in sorted(root.glob("*_image.nii")):
        label_path = image_path.with_name(image_path.name.replace("_image.nii", f"_{label_suffix}.nii"))
        if not label_path.is_file():
            raise DataError(f"no label volume for {image_path}: expected {label_path}")
        pairs.append((read_volume(image_path).data, read_label_volume(label_path).data))
    if not pairs:
        raise DataError(f"{role} directory {root} holds no *_image.nii volumes")
    return pairs


def _train(config: RunConfig) -> int:
    space = config.label_space_model()
    train_pairs = load_pairs(config.train_dir, config.label_suffix, "train")
    val_pairs = load_pairs(config.val_dir, config.label_suffix, "val")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / f"{config.stage}_config.txt", dump_run_config(config))
    logger.info("[train] stage=%s views=%s train=%d val=%d", config.stage, ",".join(v.value for v in config.views), len(train_pairs), len(val_pairs))

    for view in config.views:
        data = TrainingData.from_volumes(train_pairs, val_pairs, view, space)
        if config.stage == "finetune":
            if config.init_dir is None:
                raise UsageError("init_dir is required for fine-tuning")
            checkpoint = load_checkpoint(Path(config.init_dir) / f"pretrain_{view.value}{settings.CHECKPOINT_SUFFIX}")
            if checkpoint.label_space != space:
                raise DataError(f"pretrained {view.value} checkpoint uses label space {checkpoint.label_space.name}, run uses {space.name}")
            net = checkpoint.network
        else:
            preset = NetworkPreset.for_view(config.preset, view, space, num_channels=config.num_channels)
            net = ViewNetwork(init_params(config.seed, preset, dtype=np.dtype(config.dtype)), view)
        run = train_stage(net, data, config.schedule(), seed=config.seed, batch_size=config.batch_size, out_dir=out)
        write_history_csv(run, out / f"history_{config.stage}_{view.value}.csv")
        print(f"{view.value}: best_epoch={run.best_epoch} val_loss={run.best_val_loss:.5f} -> {run.checkpoint_paths[-1]}")
    return 0


@router.command("pretrain", "Train view networks from scratch (auxiliary labels)")
def pretrain(args: argparse.Namespace) -> int:
    config = run_config(args, stage="pretrain", dtype=settings.TRAIN_DTYPE)
    if config.stage == "finetune":
        raise UsageError("pretrain cannot run a config with stage = finetune")
    return _train(config)


@router.command("finetune", "Continue pretrained view networks on manual labels")
def finetune(args: argparse.Namespace) -> int:
    config = run_config(args, stage="finetune", dtype=settings.TRAIN_DTYPE)
    if config.stage != "finetune":
        raise UsageError(f"finetune needs stage = finetune, config says {config.stage}")
    return _train(config)
