"""Weighted logistic + multi-class Dice loss and its per-pixel weight map.

    L = -(1/M) sum_x w(x) g(x) log p(x)  -  mean_{l present} 2 sum p_l g_l / (sum p_l^2 + sum g_l^2)
    w(x) = median(f) / f_{S(x)} + w0 * [x on a label boundary],   w0 = 2 median(f) / f_min

M is the number of pixels in the batch. Dice sums run over the whole batch;
classes with no ground-truth pixel in the batch are left out of the mean.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from quicknat.core.exceptions import DataError, ShapeError
from quicknat.core.logging import get_logger
from quicknat.db.storage import atomic_write_text
from quicknat.engine.tensor import Tensor, record

logger = get_logger(__name__)

PROB_FLOOR = 1e-12


class ClassFrequencies(BaseModel):
    values: List[float]
    absent: List[int] = Field(default_factory=list)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return len(self.values)

    @property
    def present(self) -> np.ndarray:
        return self.array[self.array > 0]

    @property
    def median(self) -> float:
        return float(np.median(self.present))

    @property
    def f_min(self) -> float:
        return float(self.present.min())

    @property
    def boundary_weight(self) -> float:
        return 2.0 * self.median / self.f_min


def class_frequencies(labels: Iterable[np.ndarray], num_classes: int) -> ClassFrequencies:
    """Exact pixel frequencies over every array in `labels`."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for array in labels:
        array = np.asarray(array)
        if array.size == 0:
            continue
        if array.min() < 0 or array.max() >= num_classes:
            raise DataError(f"labels outside 0..{num_classes - 1} in frequency count")
        counts += np.bincount(array.reshape(-1).astype(np.int64), minlength=num_classes)
    total = int(counts.sum())
    if total == 0:
        raise DataError("cannot compute class frequencies from empty label data")
    absent = [int(c) for c in np.flatnonzero(counts == 0)]
    if absent:
        logger.warning("[loss] classes absent from training labels: %s", absent)
    return ClassFrequencies(values=(counts / total).tolist(), absent=absent)


def boundary_mask(S: np.ndarray) -> np.ndarray:
    """True where a pixel differs from a 4-neighbour; no flux across the border."""
    S = np.asarray(S)
    if S.ndim != 2:
        raise ShapeError(f"boundary_mask expects a 2-D label slice, got shape {S.shape}")
    mask = np.zeros(S.shape, dtype=bool)
    dy = S[1:, :] != S[:-1, :]
    dx = S[:, 1:] != S[:, :-1]
    mask[:-1, :] |= dy
    mask[1:, :] |= dy
    mask[:, :-1] |= dx
    mask[:, 1:] |= dx
    return mask


def weight_map(S: np.ndarray, f: ClassFrequencies) -> np.ndarray:
    S = np.asarray(S)
    freq = f.array
    if S.size and S.max() >= freq.size:
        raise DataError(f"label {int(S.max())} has no entry in a {freq.size}-class frequency table")
    missing = sorted(set(np.unique(S).tolist()) & set(np.flatnonzero(freq == 0).tolist()))
    if missing:
        raise DataError(f"labels {missing} occur in the slice but have zero training frequency")
    with np.errstate(divide="ignore"):
        balance = np.where(freq > 0, f.median / np.where(freq > 0, freq, 1.0), 0.0)
    return balance[S] + f.boundary_weight * boundary_mask(S)


def weight_maps(labels: np.ndarray, f: ClassFrequencies) -> np.ndarray:
    """Stack of weight maps for a (B,H,W) label batch."""
    return np.stack([weight_map(s, f) for s in labels])


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(B,H,W) integer labels -> (B,N,H,W) indicator."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"one_hot expects (B,H,W) labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels outside 0..{num_classes - 1}")
    return (np.arange(num_classes)[None, :, None, None] == labels[:, None]).astype(dtype)


def _as_indicator(target: np.ndarray, shape) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 3:
        target = one_hot(target, shape[1])
    if target.shape != tuple(shape):
        raise ShapeError(f"targets of shape {target.shape} do not match probabilities {tuple(shape)}")
    return target


def _floored(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    clamped = (p < PROB_FLOOR) & (g > 0)
    if clamped.any():
        logger.warning("[loss] probability floor %.0e applied at %d true-class pixels", PROB_FLOOR, int(clamped.sum()))
    return np.maximum(p, PROB_FLOOR)


def logistic_term(p: np.ndarray, target: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    p = np.asarray(p)
    g = _as_indicator(target, p.shape)
    w = np.ones((p.shape[0],) + p.shape[2:]) if weights is None else np.asarray(weights)
    m = w.size
    return float(-(w[:, None] * g * np.log(_floored(p, g))).sum() / m)


def dice_term(p: np.ndarray, target: np.ndarray) -> float:
    """Mean soft Dice over classes present in `target` (the loss subtracts it)."""
    p = np.asarray(p)
    g = _as_indicator(target, p.shape)
    axes = (0, 2, 3)
    present = g.sum(axis=axes) > 0
    inter = (p * g).sum(axis=axes)
    union = (p * p).sum(axis=axes) + (g * g).sum(axis=axes)
    return float(np.mean(2 * inter[present] / union[present]))


def combined_loss(
    p: Tensor,
    target: Union[np.ndarray, Tensor],
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Scalar loss with an analytic gradient w.r.t. the probability map."""
    if p.data.ndim != 4:
        raise ShapeError(f"combined_loss expects (B,N,H,W) probabilities, got {p.shape}")
    target = target.data if isinstance(target, Tensor) else target
    g = _as_indicator(target, p.shape).astype(p.dtype, copy=False)
    b, n, h, w_ = p.shape
    w = np.ones((b, h, w_), dtype=p.dtype) if weights is None else np.asarray(weights, dtype=p.dtype)
    if w.shape != (b, h, w_):
        raise ShapeError(f"weight maps of shape {w.shape} do not match batch {(b, h, w_)}")
    m = w.size
    axes = (0, 2, 3)

    safe = _floored(p.data, g)
    logistic = -(w[:, None] * g * np.log(safe)).sum() / m

    present = g.sum(axis=axes) > 0
    inter = (p.data * g).sum(axis=axes)
    union = (p.data * p.data).sum(axis=axes) + (g * g).sum(axis=axes)
    k = int(present.sum())
    dice = float(np.sum(2 * inter[present] / union[present]) / k)

    def backward(grad: np.ndarray):
        scale = grad.reshape(())
        d_logistic = np.where(p.data >= PROB_FLOOR, -(w[:, None] * g) / safe, 0.0) / m
        u = union[None, :, None, None]
        i = inter[None, :, None, None]
        d_dice = -(2 * g / u - 4 * i * p.data / (u * u)) / k
        d_dice = d_dice * present[None, :, None, None]
        return (scale * (d_logistic + d_dice).astype(p.dtype, copy=False),)

    return record("combined_loss", (p,), np.asarray(logistic - dice, dtype=p.dtype), backward)


def write_frequency_table(f: ClassFrequencies, path: Path) -> Path:
    frame = pd.DataFrame({"label_id": range(f.num_classes), "frequency": f.values})
    atomic_write_text(Path(path), frame.to_csv(sep=" ", header=False, index=False, float_format="%.17g"))
    return Path(path)


def read_frequency_table(path: Path) -> ClassFrequencies:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"frequency table not found: {path}")
    frame = pd.read_csv(path, sep=" ", header=None, names=["label_id", "frequency"])
    if frame["label_id"].tolist() != list(range(len(frame))):
        raise DataError(f"{path}: label ids must run 0..N-1 in order")
    values = frame["frequency"].astype(float).tolist()
    if any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-9:
        raise DataError(f"{path}: frequencies must be nonnegative and sum to 1")
    return ClassFrequencies(values=values, absent=[i for i, v in enumerate(values) if v == 0])
