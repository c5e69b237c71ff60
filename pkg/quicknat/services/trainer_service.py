"""SGD-with-momentum training of one view network and the two-stage protocol."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from quicknat.core.config import settings
from quicknat.core.exceptions import DataError, NumericalError
from quicknat.core.logging import get_logger
from quicknat.db.storage import atomic_write_text
from quicknat.engine.ops import pad_to_multiple
from quicknat.engine.tensor import Tape, Tensor
from quicknat.models.training import EpochRecord, OptimizerState, Schedule, TrainRun
from quicknat.models.volumes import LabelSpace, View
from quicknat.services.checkpoint_service import load_checkpoint, save_checkpoint
from quicknat.services.loss_service import ClassFrequencies, class_frequencies, combined_loss, weight_maps
from quicknat.services.multiview_service import normalize_intensity, sagittal_merge_labels, slice_volume
from quicknat.services.network_service import SPATIAL_MULTIPLE, NetworkParameters, ViewNetwork, forward

logger = get_logger(__name__)

VolumePair = Tuple[np.ndarray, np.ndarray]


def _decays(name: str) -> bool:
    # biases and batch-norm gamma/beta are not decayed
    return name.endswith(".weight")


def sgd_momentum_step(
    params: Union[NetworkParameters, Mapping[str, Tensor]],
    grads: Optional[Mapping[str, np.ndarray]],
    state: OptimizerState,
) -> None:
    """v <- mu v - lr (g + wd w); w <- w + v, in place. `grads=None` reads each tensor's `.grad`."""
    items = list(params.items() if isinstance(params, Mapping) else params)
    for name, tensor in items:
        grad = tensor.grad if grads is None else grads.get(name)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for {name} at step {state.steps}")
        if _decays(name) and state.weight_decay:
            grad = grad + state.weight_decay * tensor.data
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(tensor.data)
        velocity = (state.momentum * velocity - state.lr * grad).astype(tensor.dtype, copy=False)
        state.velocity[name] = velocity
        tensor.data = tensor.data + velocity
    state.steps += 1


@dataclass
class SliceDataset:
    """Padded 2-D training slices of one view with their weight maps."""

    images: np.ndarray  # (S,1,H,W)
    labels: np.ndarray  # (S,H,W) int64
    weights: np.ndarray  # (S,H,W)
    frequencies: ClassFrequencies
    view: View
    label_space: LabelSpace

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return self.label_space.num_classes_for(self.view)

    @classmethod
    def from_volumes(
        cls,
        pairs: Iterable[VolumePair],
        view: View,
        label_space: LabelSpace,
        frequencies: Optional[ClassFrequencies] = None,
    ) -> "SliceDataset":
        """Slice (intensity, labels) volumes along `view`; sagittal labels are merged.

        Frequencies come from these labels unless given (validation sets reuse
        the training frequencies).
        """
        view = View(view)
        images: List[np.ndarray] = []
        labels: List[np.ndarray] = []
        for intensity, truth in pairs:
            intensity = getattr(intensity, "data", intensity)
            truth = np.asarray(getattr(truth, "data", truth)).astype(np.int64)
            if intensity.shape != truth.shape:
                raise DataError(f"intensity {intensity.shape} and label {truth.shape} volumes differ in shape")
            if view is View.SAGITTAL:
                truth = sagittal_merge_labels(truth, label_space)
            images.append(slice_volume(normalize_intensity(intensity), view))
            labels.append(slice_volume(truth, view))
        if not images:
            raise DataError("no volumes to build a slice dataset from")
        return cls.from_slices(np.concatenate(images), np.concatenate(labels), view, label_space, frequencies)

    @classmethod
    def from_slices(
        cls,
        images: np.ndarray,
        labels: np.ndarray,
        view: View,
        label_space: LabelSpace,
        frequencies: Optional[ClassFrequencies] = None,
    ) -> "SliceDataset":
        num_classes = label_space.num_classes_for(View(view))
        if frequencies is None:
            frequencies = class_frequencies([labels], num_classes)
        padded_images, _ = pad_to_multiple(images[:, None], SPATIAL_MULTIPLE, axes=(2, 3))
        padded_labels, _ = pad_to_multiple(labels, SPATIAL_MULTIPLE, axes=(1, 2))
        return cls(
            images=padded_images,
            labels=padded_labels,
            weights=weight_maps(padded_labels, frequencies),
            frequencies=frequencies,
            view=View(view),
            label_space=label_space,
        )

    def concat(self, other: "SliceDataset") -> "SliceDataset":
        """Pool two datasets of the same view; frequencies are recomputed."""
        if other.view is not self.view or other.label_space != self.label_space:
            raise DataError("cannot pool datasets of different views or label spaces")
        if other.images.shape[2:] != self.images.shape[2:]:
            raise DataError(f"slice sizes differ: {self.images.shape[2:]} vs {other.images.shape[2:]}")
        labels = np.concatenate([self.labels, other.labels])
        frequencies = class_frequencies([labels], self.num_classes)
        return SliceDataset(
            images=np.concatenate([self.images, other.images]),
            labels=labels,
            weights=weight_maps(labels, frequencies),
            frequencies=frequencies,
            view=self.view,
            label_space=self.label_space,
        )

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        starts = list(range(0, len(self), batch_size))
        # a lone trailing slice joins the previous batch; batch norm needs two samples
        if len(starts) > 1 and len(self) - starts[-1] == 1:
            starts.pop()
        for i, start in enumerate(starts):
            stop = starts[i + 1] if i + 1 < len(starts) else len(self)
            yield order[start:stop]


@dataclass
class TrainingData:
    train: SliceDataset
    val: SliceDataset

    @property
    def label_space(self) -> LabelSpace:
        return self.train.label_space

    @classmethod
    def from_volumes(
        cls,
        train_pairs: Sequence[VolumePair],
        val_pairs: Sequence[VolumePair],
        view: View,
        label_space: LabelSpace,
    ) -> "TrainingData":
        train = SliceDataset.from_volumes(train_pairs, view, label_space)
        val = SliceDataset.from_volumes(val_pairs, view, label_space, frequencies=train.frequencies)
        return cls(train=train, val=val)


def _epoch_loss(net: ViewNetwork, data: SliceDataset, batch_size: int) -> float:
    total = 0.0
    for idx in data.batches(batch_size):
        probs = forward(net, Tensor(data.images[idx].astype(net.params.dtype)))
        total += combined_loss(probs, data.labels[idx], data.weights[idx]).item() * idx.size
    return total / len(data)


def train_stage(
    net: ViewNetwork,
    data: TrainingData,
    schedule: Schedule,
    state: Optional[OptimizerState] = None,
    seed: int = 0,
    batch_size: int = 4,
    out_dir: Optional[Path] = None,
) -> TrainRun:
    """Train until the validation loss plateaus; the best-validation parameters are kept."""
    if len(data.train) == 0 or len(data.val) == 0:
        raise DataError("training and validation splits must both be non-empty")
    if data.train.num_classes != net.num_classes or data.train.view is not net.view:
        raise DataError(
            f"{data.train.view.value} data with {data.train.num_classes} classes does not fit "
            f"the {net.view.value} network with {net.num_classes} classes"
        )
    state = state if state is not None else OptimizerState(lr=schedule.initial_lr)
    rng = np.random.default_rng(seed)
    run = TrainRun(seed=seed, stage=schedule.stage, batch_size=batch_size)
    params = net.params
    best = params.snapshot()
    stale = 0

    for epoch in range(schedule.max_epochs):
        state.lr = schedule.lr_at(epoch)
        net.train()
        total = 0.0
        for idx in data.train.batches(batch_size, rng):
            params.zero_grad()
            with Tape() as tape:
                probs = forward(net, Tensor(data.train.images[idx].astype(params.dtype)))
                loss = combined_loss(probs, data.train.labels[idx], data.train.weights[idx])
            tape.backward(loss)
            sgd_momentum_step(params, None, state)
            total += loss.item() * idx.size
        net.eval()
        train_loss = total / len(data.train)
        val_loss = _epoch_loss(net, data.val, batch_size)
        if not np.isfinite(val_loss):
            raise NumericalError(f"validation loss is not finite at epoch {epoch}")
        run.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=state.lr))
        logger.info(
            "[trainer] stage=%s view=%s epoch=%d train_loss=%.5f val_loss=%.5f lr=%g",
            schedule.stage, net.view.value, epoch, train_loss, val_loss, state.lr,
        )

        if run.best_val_loss is None or val_loss < run.best_val_loss:
            improved = run.best_val_loss is None or (run.best_val_loss - val_loss) > schedule.min_improvement * abs(run.best_val_loss)
            stale = 0 if improved else stale + 1
            run.best_val_loss, run.best_epoch = val_loss, epoch
            best = params.snapshot()
        else:
            stale += 1
        if stale >= schedule.patience:
            run.stopped_early = True
            logger.info("[trainer] plateau after epoch %d (patience %d)", epoch, schedule.patience)
            break

    params.restore(best)
    net.eval()
    if out_dir is not None:
        path = Path(out_dir) / f"{schedule.stage}_{net.view.value}{settings.CHECKPOINT_SUFFIX}"
        save_checkpoint(
            net,
            path,
            state,
            stage=schedule.stage,
            seed=seed,
            best_epoch=run.best_epoch,
            label_space=data.label_space.name,
            label_space_classes=data.label_space.num_classes,
        )
        run.checkpoint_paths.append(str(path))
    return run


@dataclass
class TwoStageResult:
    pretrained: Path
    finetuned: Path
    pretrain_run: TrainRun
    finetune_run: TrainRun
    network: ViewNetwork


def two_stage(
    net: ViewNetwork,
    aux: TrainingData,
    manual: TrainingData,
    out_dir: Path,
    pretrain: Optional[Schedule] = None,
    finetune: Optional[Schedule] = None,
    seed: int = 0,
    batch_size: int = 4,
) -> TwoStageResult:
    """Pre-train on auxiliary labels, then continue from that checkpoint on manual labels."""
    if aux.label_space != manual.label_space or aux.train.view is not manual.train.view:
        raise DataError(
            f"label space mismatch between stages: {aux.label_space.name}/{aux.train.view.value} "
            f"vs {manual.label_space.name}/{manual.train.view.value}"
        )
    out_dir = Path(out_dir)
    pretrain = pretrain or Schedule.pretrain()
    finetune = finetune or Schedule.finetune()

    pre_run = train_stage(net, aux, pretrain, seed=seed, batch_size=batch_size, out_dir=out_dir)
    pretrained = Path(pre_run.checkpoint_paths[-1])

    # the pretrained parameters are the starting point; momentum restarts
    restored = load_checkpoint(pretrained).network
    fine_run = train_stage(
        restored,
        manual,
        finetune,
        OptimizerState(lr=finetune.initial_lr),
        seed=seed,
        batch_size=batch_size,
        out_dir=out_dir,
    )
    return TwoStageResult(
        pretrained=pretrained,
        finetuned=Path(fine_run.checkpoint_paths[-1]),
        pretrain_run=pre_run,
        finetune_run=fine_run,
        network=restored,
    )


def train_pooled(
    net: ViewNetwork,
    aux: TrainingData,
    manual: TrainingData,
    schedule: Optional[Schedule] = None,
    seed: int = 0,
    batch_size: int = 4,
    out_dir: Optional[Path] = None,
) -> TrainRun:
    """Train from scratch on auxiliary and manual slices pooled together."""
    pooled_train = aux.train.concat(manual.train)
    val = SliceDataset(
        images=manual.val.images,
        labels=manual.val.labels,
        weights=weight_maps(manual.val.labels, pooled_train.frequencies),
        frequencies=pooled_train.frequencies,
        view=manual.val.view,
        label_space=manual.val.label_space,
    )
    schedule = schedule or Schedule.pretrain(stage="pooled")
    return train_stage(net, TrainingData(pooled_train, val), schedule, seed=seed, batch_size=batch_size, out_dir=out_dir)


def train_only_manual(
    net: ViewNetwork,
    manual: TrainingData,
    schedule: Optional[Schedule] = None,
    seed: int = 0,
    batch_size: int = 4,
    out_dir: Optional[Path] = None,
) -> TrainRun:
    """Scratch baseline on the manual labels alone."""
    schedule = schedule or Schedule.pretrain(stage="manual")
    return train_stage(net, manual, schedule, seed=seed, batch_size=batch_size, out_dir=out_dir)


def write_history_csv(run: TrainRun, path: Path) -> Path:
    frame = pd.DataFrame([r.model_dump() for r in run.history], columns=["epoch", "train_loss", "val_loss", "lr"])
    atomic_write_text(Path(path), frame.to_csv(index=False))
    return Path(path)


