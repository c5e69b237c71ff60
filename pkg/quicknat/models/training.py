from math import floor
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from quicknat.models.network import PresetName
from quicknat.models.volumes import LabelSpace, View

Stage = Literal["pretrain", "finetune", "pooled", "manual"]

MOMENTUM = 0.95
WEIGHT_DECAY = 1e-4


class Schedule(BaseModel):
    """Step learning-rate schedule plus the plateau stopping rule."""

    stage: Stage = "pretrain"
    initial_lr: float = Field(default=0.1, gt=0)
    decay_factor: float = Field(default=10.0, gt=1)
    decay_period: int = Field(default=10, ge=1)
    patience: int = Field(default=5, ge=1)
    min_improvement: float = Field(default=1e-3, ge=0)
    max_epochs: int = Field(default=30, ge=1)

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.decay_factor ** (-floor(epoch / self.decay_period))

    @classmethod
    def pretrain(cls, **overrides) -> "Schedule":
        return cls(**{"stage": "pretrain", "initial_lr": 0.1, "decay_period": 10, **overrides})

    @classmethod
    def finetune(cls, **overrides) -> "Schedule":
        return cls(**{"stage": "finetune", "initial_lr": 0.01, "decay_period": 5, **overrides})

    @classmethod
    def overfit(cls, **overrides) -> "Schedule":
        """Desk-scale recipe for fitting one phantom: lr 0.01, one decay at epoch 20, no plateau stop."""
        max_epochs = overrides.pop("max_epochs", 30)
        return cls(
            **{
                "stage": "pretrain",
                "initial_lr": 0.01,
                "decay_period": 20,
                "patience": max_epochs,
                "max_epochs": max_epochs,
                **overrides,
            }
        )


class EpochRecord(BaseModel):
    epoch: int = Field(ge=0)
    train_loss: float
    val_loss: float
    lr: float


class TrainRun(BaseModel):
    seed: int
    stage: Stage
    batch_size: int = Field(default=4, ge=1)
    history: List[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
    stopped_early: bool = False
    checkpoint_paths: List[str] = Field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.history and record.epoch <= self.history[-1].epoch:
            raise ValueError(f"epoch {record.epoch} does not follow {self.history[-1].epoch}")
        self.history.append(record)


class RunConfig(BaseModel):
    """Key-value run configuration (see core.config.load_run_config)."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    stage: Stage = "pretrain"
    lr: Optional[float] = Field(default=None, gt=0)
    batch_size: int = Field(default=4, ge=1)
    patience: int = Field(default=5, ge=1)
    max_epochs: int = Field(default=30, ge=1)
    preset: PresetName = "miniature"
    num_channels: int = Field(default=8, ge=1)
    label_space: Literal["quicknat", "phantom"] = "phantom"
    num_classes: Optional[int] = None
    views: List[View] = Field(default_factory=lambda: [View.CORONAL, View.AXIAL, View.SAGITTAL])
    dtype: Literal["float32", "float64"] = "float32"
    train_dir: Optional[str] = None
    val_dir: Optional[str] = None
    init_dir: Optional[str] = None
    out_dir: str = "runs"
    label_suffix: str = "labels"
    corruption_rate: float = Field(default=0.0, ge=0, le=0.5)

    @field_validator("views", mode="before")
    @classmethod
    def split_views(cls, value):
        return View.parse_list(value)

    def label_space_model(self) -> LabelSpace:
        return LabelSpace.by_name(self.label_space, self.num_classes)

    def schedule(self) -> Schedule:
        overrides = {"patience": self.patience, "max_epochs": self.max_epochs}
        if self.lr is not None:
            overrides["initial_lr"] = self.lr
        if self.stage == "finetune":
            return Schedule.finetune(**overrides)
        return Schedule.pretrain(**{**overrides, "stage": self.stage})


class OptimizerState(BaseModel):
    """SGD-with-momentum state: one velocity array per parameter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lr: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=MOMENTUM, ge=0, lt=1)
    weight_decay: float = Field(default=WEIGHT_DECAY, ge=0)
    velocity: Dict[str, np.ndarray] = Field(default_factory=dict)
    steps: int = 0
