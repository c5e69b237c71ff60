"""Segmentation accuracy, volume agreement, reliability and group statistics."""

from __future__ import annotations

from math import comb
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import stats

from quicknat.core.exceptions import DataError, ShapeError
from quicknat.core.logging import get_logger
from quicknat.db.storage import atomic_write_text
from quicknat.models.metrics import (
    EffectSize,
    GroupStatistics,
    MetricsReport,
    RegressionResult,
    StructureRow,
    SubjectInfo,
)
from quicknat.models.volumes import LabelSpace, LabelVolume

logger = get_logger(__name__)

LabelsLike = Union[np.ndarray, LabelVolume]
EXACT_RANKSUM_LIMIT = 10
EXACT_RANKSUM_MAX_TOTAL = 200


def _labels(v: LabelsLike) -> np.ndarray:
    return v.data if isinstance(v, LabelVolume) else np.asarray(v)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"label volumes differ in shape: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- overlap / volume

def dice_score(a: LabelsLike, b: LabelsLike, label: int) -> float:
    a, b = _labels(a), _labels(b)
    _same_shape(a, b)
    ma, mb = a == label, b == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def volume_of(a: LabelsLike, label: Union[int, Sequence[int]], spacing: Optional[Tuple[float, float, float]] = None) -> float:
    """Volume in ml of one label (or several labels together)."""
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelVolume) else (1.0, 1.0, 1.0)
    count = int(np.isin(_labels(a), np.atleast_1d(label)).sum())
    return count * float(np.prod(spacing)) / 1000.0


def volume_distance(va: float, ve: float) -> float:
    if va < 0 or ve < 0:
        raise DataError(f"volumes must be nonnegative, got {va} and {ve}")
    if va + ve == 0:
        logger.warning("[metrics] volume distance of two empty structures taken as 0")
        return 0.0
    return 2.0 * abs(va - ve) / (va + ve)


def combined_structure_volume(
    v: LabelsLike,
    label_space: LabelSpace,
    spacing: Optional[Tuple[float, float, float]] = None,
) -> Dict[str, float]:
    """Left+right combined volume per structure, plus all foreground as "Whole Brain"."""
    volumes = {name: volume_of(v, labels, spacing) for name, labels in label_space.structure_groups().items()}
    volumes["Whole Brain"] = volume_of(v, list(range(1, label_space.num_classes)), spacing)
    return volumes


# ---------------------------------------------------------------- coefficients of variation

def cv_total(volumes: Sequence[float]) -> float:
    """sigma / mu of a series, population standard deviation."""
    values = np.asarray(volumes, dtype=np.float64)
    if values.size < 2:
        raise DataError("coefficient of variation needs at least two values")
    mu = values.mean()
    if mu <= 0:
        raise DataError(f"coefficient of variation needs a positive mean, got {mu}")
    return float(values.std() / mu)


def cv_intra_session(sessions: Sequence[Sequence[float]]) -> float:
    """Root mean square of the per-session CVs (two scans per session)."""
    if not sessions:
        raise DataError("no sessions given")
    per_session = np.array([cv_total(s) for s in sessions])
    return float(np.sqrt(np.mean(per_session ** 2)))


def cv_rms(per_subject_series: Sequence[Sequence[float]]) -> float:
    """Per-subject CV across sites, combined as the RMS over subjects."""
    return cv_intra_session(per_subject_series)


def cv_gap(cv_s: float, cv_t: float) -> float:
    return abs(cv_s - cv_t)


# ---------------------------------------------------------------- effect sizes

def _z(confidence: float) -> float:
    return float(stats.norm.ppf(0.5 + confidence / 2.0))


def _effect_ci(value: float, n1: int, n2: int, confidence: float) -> EffectSize:
    se = np.sqrt((n1 + n2) / (n1 * n2) + value ** 2 / (2.0 * (n1 + n2)))
    half = _z(confidence) * se
    return EffectSize(value=value, ci_low=value - half, ci_high=value + half)


def _groups(group1, group2) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(group1, dtype=np.float64), np.asarray(group2, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("each group needs at least two values")
    return a, b


def hedges_correction(n1: int, n2: int) -> float:
    return 1.0 - 3.0 / (4.0 * (n1 + n2) - 9.0)


def hedges_g(group1: Sequence[float], group2: Sequence[float], confidence: float = 0.95) -> EffectSize:
    a, b = _groups(group1, group2)
    n1, n2 = a.size, b.size
    pooled = np.sqrt(((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / (n1 + n2 - 2))
    if pooled == 0:
        raise DataError("pooled standard deviation is zero")
    g = hedges_correction(n1, n2) * (a.mean() - b.mean()) / pooled
    return _effect_ci(float(g), n1, n2, confidence)


def glass_delta(group: Sequence[float], control: Sequence[float], confidence: float = 0.95) -> EffectSize:
    """Mean difference scaled by the control group's SD; no small-sample factor."""
    a, b = _groups(group, control)
    sd = b.std(ddof=1)
    if sd == 0:
        raise DataError("control group standard deviation is zero")
    return _effect_ci(float((a.mean() - b.mean()) / sd), a.size, b.size, confidence)


# ---------------------------------------------------------------- rank-sum test

def _exact_ranksum_p(doubled: np.ndarray, n1: int, observed: int) -> float:
    """Two-sided p from the exact null distribution of the doubled rank sum of n1 items."""
    total = int(doubled.sum())
    # ways[k, s]: subsets of size k with doubled rank sum s
    ways = np.zeros((n1 + 1, total + 1))
    ways[0, 0] = 1.0
    for r in doubled:
        ways[1:, r:] += ways[:-1, : total + 1 - r].copy()
    dist = ways[n1] / comb(doubled.size, n1)
    lower = dist[: observed + 1].sum()
    upper = dist[observed:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def wilcoxon_ranksum(
    x: Sequence[float],
    y: Sequence[float],
    method: Literal["auto", "exact", "asymptotic"] = "auto",
) -> float:
    """Two-sided rank-sum p-value with midranks for ties."""
    a, b = _groups(x, y)
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return 1.0
    if method == "auto":
        small = min(a.size, b.size) < EXACT_RANKSUM_LIMIT and pooled.size <= EXACT_RANKSUM_MAX_TOTAL
        method = "exact" if small else "asymptotic"
    if method == "exact":
        doubled = np.rint(2 * stats.rankdata(pooled)).astype(np.int64)
        return _exact_ranksum_p(doubled, a.size, int(doubled[: a.size].sum()))
    result = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    return float(result.pvalue)


# ---------------------------------------------------------------- regression / reliability

def _encode(values: Sequence, name: str) -> np.ndarray:
    series = pd.Series(list(values))
    if pd.api.types.is_numeric_dtype(series):
        return series.to_numpy(dtype=np.float64)
    codes, levels = pd.factorize(series, sort=True)
    if len(levels) > 2:
        raise DataError(f"{name} must be binary, got levels {list(levels)}")
    return codes.astype(np.float64)


def _collinear_columns(design: pd.DataFrame) -> List[str]:
    full = np.linalg.matrix_rank(design.to_numpy())
    return [
        col for col in design.columns
        if np.linalg.matrix_rank(design.drop(columns=col).to_numpy()) == full
    ]


def linear_model(
    volume: Sequence[float],
    age: Sequence[float],
    sex: Sequence,
    diagnosis: Sequence,
) -> RegressionResult:
    """OLS of standardised volume on standardised age, sex and diagnosis."""
    frame = pd.DataFrame(
        {
            "volume": _encode(volume, "volume"),
            "age": _encode(age, "age"),
            "sex": _encode(sex, "sex"),
            "diagnosis": _encode(diagnosis, "diagnosis"),
        }
    )
    n = len(frame)
    if n <= 4:
        raise DataError(f"linear model needs more than 4 rows, got {n}")
    constant = [c for c in frame.columns if frame[c].std(ddof=0) == 0]
    if constant:
        raise DataError(f"rank-deficient design: constant columns {constant}")
    z = (frame - frame.mean()) / frame.std(ddof=0)
    design = sm.add_constant(z[["age", "sex", "diagnosis"]])
    if np.linalg.matrix_rank(design.to_numpy()) < design.shape[1]:
        raise DataError(f"rank-deficient design: collinear columns {_collinear_columns(design)}")
    fit = sm.OLS(z["volume"], design).fit()
    if fit.ssr <= 1e-20 * n:
        p_value = 0.0
    else:
        p_value = float(fit.pvalues["diagnosis"])
    return RegressionResult(
        coefficient=float(fit.params["diagnosis"]),
        p_value=p_value,
        coefficients={k: float(v) for k, v in fit.params.items()},
        n=n,
    )


def icc(rater1: Sequence[float], rater2: Sequence[float]) -> float:
    """Two-way, single-measure, absolute-agreement intra-class correlation."""
    y = np.column_stack([np.asarray(rater1, dtype=np.float64), np.asarray(rater2, dtype=np.float64)])
    n, k = y.shape
    if n < 3:
        raise DataError("ICC needs at least three paired measurements")
    grand = y.mean()
    ss_total = ((y - grand) ** 2).sum()
    if ss_total == 0:
        raise DataError("ICC undefined: zero total variance")
    ss_rows = k * ((y.mean(axis=1) - grand) ** 2).sum()
    ss_cols = n * ((y.mean(axis=0) - grand) ** 2).sum()
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_err = (ss_total - ss_rows - ss_cols) / ((n - 1) * (k - 1))
    return float((ms_rows - ms_err) / (ms_rows + (k - 1) * ms_err + k * (ms_cols - ms_err) / n))


# ---------------------------------------------------------------- reports

def structure_rows(
    pred: LabelsLike,
    truth: LabelsLike,
    label_space: LabelSpace,
    subject: str,
    spacing: Optional[Tuple[float, float, float]] = None,
) -> List[StructureRow]:
    """One row per structure present in either segmentation."""
    p, t = _labels(pred), _labels(truth)
    _same_shape(p, t)
    if spacing is None:
        spacing = truth.spacing if isinstance(truth, LabelVolume) else (1.0, 1.0, 1.0)
    present = sorted(set(np.unique(p).tolist()) | set(np.unique(t).tolist()))
    rows = []
    for label in present:
        if label == 0:
            continue
        if label >= label_space.num_classes:
            raise DataError(f"label {label} outside the {label_space.name} label space")
        vp, vt = volume_of(p, label, spacing), volume_of(t, label, spacing)
        rows.append(
            StructureRow(
                subject=subject,
                structure=label_space.class_names[label],
                label=int(label),
                dice=dice_score(p, t, label),
                volume_pred_ml=vp,
                volume_true_ml=vt,
                volume_distance=volume_distance(vp, vt),
            )
        )
    return rows


def build_report(
    pred: LabelsLike,
    truth: LabelsLike,
    label_space: LabelSpace,
    subject: str,
    info: Optional[SubjectInfo] = None,
) -> MetricsReport:
    return MetricsReport(
        rows=structure_rows(pred, truth, label_space, subject),
        subjects=[info or SubjectInfo(subject=subject)],
    )


def report_frame(report: MetricsReport) -> pd.DataFrame:
    columns = list(StructureRow.model_fields)
    return pd.DataFrame([r.model_dump() for r in report.rows], columns=columns)


def summary(report: MetricsReport) -> pd.DataFrame:
    """Mean and SD of Dice per structure."""
    frame = report_frame(report)
    grouped = frame.groupby(["label", "structure"])["dice"]
    out = grouped.agg(dice_mean="mean", dice_std=lambda s: s.std(ddof=0), n="count")
    return out.reset_index()


def mean_dice(report: MetricsReport) -> Tuple[float, float]:
    """Mean and SD over subjects of the per-subject mean Dice."""
    per_subject = report_frame(report).groupby("subject")["dice"].mean()
    if per_subject.empty:
        raise DataError("report has no rows")
    return float(per_subject.mean()), float(per_subject.std(ddof=0))


def worst_subjects(report: MetricsReport, k: int = 5) -> List[Tuple[str, float]]:
    per_subject = report_frame(report).groupby("subject")["dice"].mean().sort_values(kind="stable")
    return [(str(s), float(d)) for s, d in per_subject.head(k).items()]


def consistency_report(
    run_a: LabelsLike,
    run_b: LabelsLike,
    label_space: LabelSpace,
    spacing: Optional[Tuple[float, float, float]] = None,
) -> Dict[str, float]:
    """Volume distance per structure between two segmentations of one scan."""
    a, b = _labels(run_a), _labels(run_b)
    _same_shape(a, b)
    return {
        label_space.class_names[label]: volume_distance(volume_of(a, label, spacing), volume_of(b, label, spacing))
        for label in range(1, label_space.num_classes)
    }


def group_statistics(
    structure: str,
    cases: Sequence[float],
    controls: Sequence[float],
    age: Optional[Sequence[float]] = None,
    sex: Optional[Sequence] = None,
    confidence: float = 0.95,
) -> GroupStatistics:
    """Effect sizes and rank-sum test of case vs control volumes; OLS when covariates are given."""
    regression = None
    if age is not None and sex is not None:
        volumes = list(cases) + list(controls)
        diagnosis = [1] * len(cases) + [0] * len(controls)
        regression = linear_model(volumes, age, sex, diagnosis)
    return GroupStatistics(
        structure=structure,
        hedges_g=hedges_g(cases, controls, confidence),
        glass_delta=glass_delta(cases, controls, confidence),
        ranksum_p=wilcoxon_ranksum(cases, controls),
        regression=regression,
    )


def write_report_csv(report: MetricsReport, path: Path) -> Path:
    atomic_write_text(Path(path), report_frame(report).to_csv(index=False))
    return Path(path)


def write_report_json(report: MetricsReport, path: Path) -> Path:
    """Group statistics and subject metadata; per-structure rows go to the CSV."""
    payload = report.model_copy(update={"rows": []})
    atomic_write_text(Path(path), payload.model_dump_json(indent=2))
    return Path(path)


def mean_foreground_dice(pred: LabelsLike, truth: LabelsLike, num_classes: int) -> float:
    """Average Dice over labels 1..num_classes-1."""
    return float(np.mean([dice_score(pred, truth, label) for label in range(1, num_classes)]))
