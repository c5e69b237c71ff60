from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class SubjectInfo(BaseModel):
    subject: str
    age: Optional[float] = None
    sex: Optional[Literal["F", "M"]] = None
    diagnosis: Optional[str] = None


class StructureRow(BaseModel):
    subject: str
    structure: str
    label: int
    dice: float = Field(ge=0, le=1)
    volume_pred_ml: float = Field(ge=0)
    volume_true_ml: float = Field(ge=0)
    volume_distance: float = Field(ge=0, le=2)


class EffectSize(BaseModel):
    value: float
    ci_low: float
    ci_high: float

    def contains(self, x: float) -> bool:
        return self.ci_low <= x <= self.ci_high


class RegressionResult(BaseModel):
    coefficient: float
    p_value: float = Field(ge=0, le=1)
    coefficients: Dict[str, float] = Field(default_factory=dict)
    n: int


class GroupStatistics(BaseModel):
    structure: str
    hedges_g: Optional[EffectSize] = None
    glass_delta: Optional[EffectSize] = None
    ranksum_p: Optional[float] = None
    regression: Optional[RegressionResult] = None
    cv_s: Optional[float] = None
    cv_t: Optional[float] = None


class MetricsReport(BaseModel):
    rows: List[StructureRow] = Field(default_factory=list)
    subjects: List[SubjectInfo] = Field(default_factory=list)
    group_statistics: List[GroupStatistics] = Field(default_factory=list)

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)
        self.subjects.extend(other.subjects)
        self.group_statistics.extend(other.group_statistics)
