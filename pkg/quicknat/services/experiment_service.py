"""Desk-scale phantom studies: training strategies and view aggregation."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from quicknat.core.logging import get_logger
from quicknat.models.network import NetworkPreset
from quicknat.models.training import Schedule
from quicknat.models.volumes import AggregationWeights, LabelSpace, PhantomSpec, View
from quicknat.services.checkpoint_service import load_checkpoint
from quicknat.services.metrics_service import mean_foreground_dice
from quicknat.services.multiview_service import (
    combine_views,
    normalize_intensity,
    predict_view,
    sagittal_merge_labels,
    view_probabilities,
)
from quicknat.services.network_service import ViewNetwork, init_params
from quicknat.services.phantom_service import PhantomCase, phantom_cohort
from quicknat.services.trainer_service import (
    TrainingData,
    train_only_manual,
    train_pooled,
    train_stage,
    two_stage,
)

logger = get_logger(__name__)


class StudyConfig(BaseModel):
    seed: int = 0
    grid_size: int = Field(default=32, ge=16)
    num_classes: int = Field(default=6, ge=4, le=6)
    num_channels: int = Field(default=8, ge=1)
    n_aux: int = Field(default=20, ge=1)
    n_manual: int = Field(default=2, ge=1)
    n_val: int = Field(default=1, ge=1)
    n_test: int = Field(default=5, ge=1)
    corruption_rate: float = Field(default=0.2, ge=0, le=0.5)
    pretrain_epochs: int = Field(default=10, ge=1)
    finetune_epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=4, ge=1)
    view: View = View.CORONAL

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace.phantom(self.num_classes)

    @property
    def phantom(self) -> PhantomSpec:
        return PhantomSpec(grid_size=self.grid_size, num_classes=self.num_classes)


class StrategyComparison(BaseModel):
    seed: int
    dice: Dict[str, float]

    def margin(self, better: str, worse: str) -> float:
        return self.dice[better] - self.dice[worse]


class ViewComparison(BaseModel):
    seed: int
    dice: Dict[str, float]

    @property
    def best_single_view(self) -> float:
        return max(v for k, v in self.dice.items() if k != "aggregated")


def _pairs(cases: List[PhantomCase], aux: bool = False):
    return [(c.intensity.data, (c.aux_labels if aux else c.labels).data) for c in cases]


def _fresh_net(config: StudyConfig, view: View, seed: int) -> ViewNetwork:
    preset = NetworkPreset.for_view("miniature", view, config.label_space, num_channels=config.num_channels)
    return ViewNetwork(init_params(seed, preset), view)


def held_out_dice(net: ViewNetwork, cases: List[PhantomCase], label_space: LabelSpace) -> float:
    """Mean foreground Dice of one view network; sagittal is scored in merged label space."""
    scores = []
    for case in cases:
        probs = predict_view(net, normalize_intensity(case.intensity))
        pred = np.argmax(probs, axis=-1)
        truth = case.labels.data
        if net.view is View.SAGITTAL:
            truth = sagittal_merge_labels(truth, label_space)
        scores.append(mean_foreground_dice(pred, truth, net.num_classes))
    return float(np.mean(scores))


class OverfitResult(BaseModel):
    seed: int
    dice: float
    train_losses: List[float]


def overfit_phantom(
    seed: int = 0,
    grid_size: int = 64,
    num_classes: int = 6,
    num_channels: int = 16,
    max_epochs: int = 30,
    batch_size: int = 4,
) -> OverfitResult:
    """Fit a coronal network to one phantom and score it on that same volume."""
    space = LabelSpace.phantom(num_classes)
    case = phantom_cohort(1, seed=seed, spec=PhantomSpec(grid_size=grid_size, num_classes=num_classes))[0]
    data = TrainingData.from_volumes(_pairs([case]), _pairs([case]), View.CORONAL, space)
    preset = NetworkPreset.for_view("miniature", View.CORONAL, space, num_channels=num_channels)
    net = ViewNetwork(init_params(seed, preset, dtype=np.float32), View.CORONAL)
    run = train_stage(net, data, Schedule.overfit(max_epochs=max_epochs), seed=seed, batch_size=batch_size)
    dice = held_out_dice(net, [case], space)
    logger.info("[study] overfit seed=%d epochs=%d dice=%.4f", seed, len(run.history), dice)
    return OverfitResult(seed=seed, dice=dice, train_losses=[r.train_loss for r in run.history])


def compare_training_strategies(config: Optional[StudyConfig] = None, out_dir: Optional[Path] = None) -> StrategyComparison:
    """Pre-trained, only-manual, fine-tuned and pooled models scored on held-out phantoms."""
    config = config or StudyConfig()
    space, view, seed = config.label_space, config.view, config.seed
    spec = config.phantom
    aux_cases = phantom_cohort(config.n_aux + config.n_val, seed=seed, corruption_rate=config.corruption_rate, spec=spec)
    manual_cases = phantom_cohort(config.n_manual + config.n_val, seed=seed + 1, spec=spec)
    test_cases = phantom_cohort(config.n_test, seed=seed + 2, spec=spec)

    aux = TrainingData.from_volumes(
        _pairs(aux_cases[: config.n_aux], aux=True), _pairs(aux_cases[config.n_aux :], aux=True), view, space
    )
    manual = TrainingData.from_volumes(
        _pairs(manual_cases[: config.n_manual]), _pairs(manual_cases[config.n_manual :]), view, space
    )
    pretrain = Schedule.pretrain(max_epochs=config.pretrain_epochs)
    finetune = Schedule.finetune(max_epochs=config.finetune_epochs)
    out_dir = Path(out_dir or Path("runs") / f"strategies_seed{seed}")

    staged = two_stage(
        _fresh_net(config, view, seed), aux, manual, out_dir, pretrain, finetune, seed=seed, batch_size=config.batch_size
    )
    dice = {
        "pretrained": held_out_dice(load_checkpoint(staged.pretrained).network, test_cases, space),
        "finetuned": held_out_dice(staged.network, test_cases, space),
    }

    scratch = _fresh_net(config, view, seed)
    train_only_manual(
        scratch, manual, Schedule.pretrain(stage="manual", max_epochs=config.finetune_epochs), seed=seed, batch_size=config.batch_size
    )
    dice["only_manual"] = held_out_dice(scratch, test_cases, space)

    pooled = _fresh_net(config, view, seed)
    train_pooled(
        pooled, aux, manual, Schedule.pretrain(stage="pooled", max_epochs=config.pretrain_epochs), seed=seed, batch_size=config.batch_size
    )
    dice["pooled"] = held_out_dice(pooled, test_cases, space)

    logger.info("[study] strategies seed=%d dice=%s", seed, {k: round(v, 4) for k, v in dice.items()})
    return StrategyComparison(seed=seed, dice=dice)


def compare_view_aggregation(
    config: Optional[StudyConfig] = None,
    weights: Optional[AggregationWeights] = None,
) -> ViewComparison:
    """Single-view Dice for each view against the three-view aggregate, on clean phantoms."""
    config = config or StudyConfig()
    space, seed = config.label_space, config.seed
    spec = config.phantom
    train_cases = phantom_cohort(config.n_manual + config.n_val, seed=seed + 1, spec=spec)
    test_cases = phantom_cohort(config.n_test, seed=seed + 2, spec=spec)

    nets = []
    for view in (View.CORONAL, View.AXIAL, View.SAGITTAL):
        data = TrainingData.from_volumes(
            _pairs(train_cases[: config.n_manual]), _pairs(train_cases[config.n_manual :]), view, space
        )
        net = _fresh_net(config, view, seed)
        train_stage(net, data, Schedule.pretrain(max_epochs=config.pretrain_epochs), seed=seed, batch_size=config.batch_size)
        nets.append(net)

    dice = {net.view.value: held_out_dice(net, test_cases, space) for net in nets}
    aggregated = []
    for case in test_cases:
        labels = combine_views(view_probabilities(nets, case.intensity), space, weights)
        aggregated.append(mean_foreground_dice(labels, case.labels.data, space.num_classes))
    dice["aggregated"] = float(np.mean(aggregated))
    logger.info("[study] views seed=%d dice=%s", seed, {k: round(v, 4) for k, v in dice.items()})
    return ViewComparison(seed=seed, dice=dice)
