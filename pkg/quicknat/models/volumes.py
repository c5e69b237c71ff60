from __future__ import annotations

from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class View(str, Enum):
    CORONAL = "coronal"
    AXIAL = "axial"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        # conformed array layout: coronal slices along axis 0, axial along 1,
        # sagittal along 2 (the left/right axis)
        return {View.CORONAL: 0, View.AXIAL: 1, View.SAGITTAL: 2}[self]

    @classmethod
    def parse_list(cls, value) -> List["View"]:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        return [cls(v) for v in value]


QUICKNAT_CLASS_NAMES: List[str] = [
    "Background",
    "Cortical White Matter Left",
    "Cortical Grey Matter Left",
    "Cortical White Matter Right",
    "Cortical Grey Matter Right",
    "Lateral Ventricle Left",
    "Cerebellar White Matter Left",
    "Cerebellar Grey Matter Left",
    "Thalamus Left",
    "Caudate Left",
    "Putamen Left",
    "Pallidum Left",
    "3rd Ventricle",
    "4th Ventricle",
    "Brainstem",
    "Hippocampus Left",
    "Amygdala Left",
    "Ventral DC Left",
    "Lateral Ventricle Right",
    "Cerebellar White Matter Right",
    "Cerebellar Grey Matter Right",
    "Thalamus Right",
    "Caudate Right",
    "Putamen Right",
    "Pallidum Right",
    "Hippocampus Right",
    "Amygdala Right",
    "Ventral DC Right",
]

QUICKNAT_HEMISPHERE_PAIRS: List[Tuple[int, int]] = [
    (1, 3), (2, 4), (5, 18), (6, 19), (7, 20), (8, 21),
    (9, 22), (10, 23), (11, 24), (15, 25), (16, 26), (17, 27),
]

PHANTOM_CLASS_NAMES: List[str] = [
    "Background",
    "Shell",
    "Lobe Left",
    "Lobe Right",
    "Midline Body",
    "Nucleus",
]


class LabelSpace(BaseModel):
    """Class list plus the left/right pairs merged for sagittal training."""

    model_config = ConfigDict(frozen=True)

    name: str
    class_names: List[str]
    pairs: List[Tuple[int, int]] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_pairs(self) -> "LabelSpace":
        seen = set()
        for left, right in self.pairs:
            for label in (left, right):
                if not 0 < label < len(self.class_names) or label in seen:
                    raise ValueError(f"invalid or repeated hemisphere label {label}")
                seen.add(label)
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def merge_map(self) -> np.ndarray:
        """merge_map[label] is the merged (sagittal) id of `label`."""
        right_to_left = {right: left for left, right in self.pairs}
        kept = [c for c in range(self.num_classes) if c not in right_to_left]
        position = {c: i for i, c in enumerate(kept)}
        return np.array([position[right_to_left.get(c, c)] for c in range(self.num_classes)], dtype=np.int64)

    @property
    def num_merged_classes(self) -> int:
        return self.num_classes - len(self.pairs)

    def num_classes_for(self, view: View) -> int:
        return self.num_merged_classes if view is View.SAGITTAL else self.num_classes

    def structure_groups(self) -> Dict[str, List[int]]:
        """Hemisphere-combined structures: name without side -> member labels."""
        groups: Dict[str, List[int]] = {}
        paired = {label for pair in self.pairs for label in pair}
        for left, right in self.pairs:
            groups[self.class_names[left].removesuffix(" Left")] = [left, right]
        for label in range(1, self.num_classes):
            if label not in paired:
                groups[self.class_names[label]] = [label]
        return groups

    @classmethod
    def quicknat(cls) -> "LabelSpace":
        return cls(name="quicknat", class_names=QUICKNAT_CLASS_NAMES, pairs=QUICKNAT_HEMISPHERE_PAIRS)

    @classmethod
    def phantom(cls, num_classes: int = 6) -> "LabelSpace":
        pairs = [(2, 3)] if num_classes >= 4 else []
        return cls(name="phantom", class_names=PHANTOM_CLASS_NAMES[:num_classes], pairs=pairs)

    @classmethod
    def by_name(cls, name: str, num_classes: Optional[int] = None) -> "LabelSpace":
        if name == "quicknat":
            return cls.quicknat()
        if name == "phantom":
            return cls.phantom(num_classes or 6)
        raise ValueError(f"unknown label space {name!r}")


class Volume(BaseModel):
    """3-D intensity grid with voxel spacing in mm."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("data")
    @classmethod
    def three_dimensional(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {value.shape}")
        return value

    @field_validator("spacing")
    @classmethod
    def positive_spacing(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(s <= 0 for s in value):
            raise ValueError(f"voxel spacing must be positive, got {value}")
        return tuple(float(s) for s in value)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))


class LabelVolume(Volume):
    """Integer label grid, 0 = background."""

    @field_validator("data")
    @classmethod
    def integer_labels(cls, value: np.ndarray) -> np.ndarray:
        if not np.issubdtype(value.dtype, np.integer):
            raise ValueError(f"label volume needs an integer dtype, got {value.dtype}")
        if value.size and value.min() < 0:
            raise ValueError("label volume contains negative labels")
        return value

    def check_range(self, num_classes: int) -> None:
        if self.data.size and self.data.max() >= num_classes:
            raise ValueError(f"label {int(self.data.max())} outside 0..{num_classes - 1}")


class ProbVolume(BaseModel):
    """Per-voxel class probabilities, shape (D, H, W, N)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray

    @field_validator("data")
    @classmethod
    def four_dimensional(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 4:
            raise ValueError(f"probability volume must be (D,H,W,N), got shape {value.shape}")
        return value

    @property
    def num_classes(self) -> int:
        return self.data.shape[-1]

    def is_simplex(self, tol: float = 1e-6) -> bool:
        return bool(np.all(self.data >= -tol) and np.allclose(self.data.sum(axis=-1), 1.0, atol=tol))


class AggregationWeights(BaseModel):
    axial: float = Field(default=0.4, ge=0)
    coronal: float = Field(default=0.4, ge=0)
    sagittal: float = Field(default=0.2, ge=0)

    def for_view(self, view: View) -> float:
        return getattr(self, view.value)

    @classmethod
    def from_list(cls, values: List[float]) -> "AggregationWeights":
        if len(values) != 3:
            raise ValueError("expected three weights: axial, coronal, sagittal")
        return cls(axial=values[0], coronal=values[1], sagittal=values[2])


class PhantomSpec(BaseModel):
    grid_size: int = Field(default=64, ge=16)
    num_classes: int = Field(default=6, ge=4, le=6)
    intensities: List[float] = Field(default_factory=lambda: [0.0, 0.45, 0.75, 0.75, 0.3, 1.0])
    noise_sd: float = Field(default=0.05, ge=0)
    jitter: float = Field(default=0.05, ge=0, le=0.1)
    seed: int = 0

    @model_validator(mode="after")
    def intensities_per_class(self) -> "PhantomSpec":
        if len(self.intensities) < self.num_classes:
            raise ValueError(f"need {self.num_classes} class intensities, got {len(self.intensities)}")
        self.intensities = self.intensities[: self.num_classes]
        return self


class RemapRow(BaseModel):
    structure: str
    quicknat: int = Field(ge=1)
    freesurfer: int = Field(ge=0)
    manual: int = Field(ge=0)
