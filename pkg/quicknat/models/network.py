from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from quicknat.models.volumes import LabelSpace, View

PresetName = Literal["full", "miniature"]


class NetworkPreset(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: PresetName = "full"
    num_channels: int = Field(default=64, ge=1)
    kernel_size: int = 5
    num_classes: int = Field(default=28, ge=2)
    in_channels: int = 1
    classifier_gain: float = 0.1
    # None for free-standing presets (gradient checks, unit fixtures)
    label_space: Optional[LabelSpace] = None

    @field_validator("kernel_size")
    @classmethod
    def odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel size must be odd for same padding")
        return value

    @model_validator(mode="after")
    def classes_fit_label_space(self) -> "NetworkPreset":
        space = self.label_space
        if space is not None and self.num_classes not in (space.num_classes, space.num_merged_classes):
            raise ValueError(
                f"{self.num_classes} classes fit no view of the {space.name} label space "
                f"({space.num_classes} or {space.num_merged_classes})"
            )
        return self

    def fits_view(self, view: View) -> bool:
        return self.label_space is None or self.label_space.num_classes_for(View(view)) == self.num_classes

    @classmethod
    def full(cls, view: View, label_space: LabelSpace = None) -> "NetworkPreset":
        label_space = label_space or LabelSpace.quicknat()
        return cls(
            name="full",
            num_channels=64,
            kernel_size=5,
            num_classes=label_space.num_classes_for(view),
            label_space=label_space,
        )

    @classmethod
    def miniature(
        cls,
        num_classes: int = 3,
        num_channels: int = 4,
        kernel_size: int = 5,
        label_space: Optional[LabelSpace] = None,
    ) -> "NetworkPreset":
        """Reduced width for tests and desk-scale runs."""
        return cls(
            name="miniature",
            num_channels=num_channels,
            kernel_size=kernel_size,
            num_classes=num_classes,
            label_space=label_space,
        )

    @classmethod
    def for_view(cls, name: PresetName, view: View, label_space: LabelSpace, num_channels: int = 8) -> "NetworkPreset":
        if name == "full":
            return cls.full(view, label_space)
        return cls.miniature(
            num_classes=label_space.num_classes_for(view), num_channels=num_channels, label_space=label_space
        )
