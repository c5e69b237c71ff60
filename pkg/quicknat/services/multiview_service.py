"""Per-view slicing, inference and three-view probability aggregation.

Array layout of a conformed volume: coronal slices along axis 0, axial along
axis 1, sagittal along axis 2. Probability volumes carry classes last.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np

from quicknat.core.exceptions import ShapeError
from quicknat.core.logging import get_logger
from quicknat.engine.ops import argmax_channels, pad_to_multiple
from quicknat.models.volumes import AggregationWeights, LabelSpace, LabelVolume, ProbVolume, View, Volume
from quicknat.services.network_service import SPATIAL_MULTIPLE, ViewNetwork, predict_probs

logger = get_logger(__name__)

ArrayOrVolume = Union[np.ndarray, Volume]


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, (Volume, ProbVolume)) else np.asarray(v)


def slice_volume(v: ArrayOrVolume, view: View) -> np.ndarray:
    """(D,H,W) volume -> slice stack with the view's axis first."""
    data = _array(v)
    if data.ndim != 3:
        raise ShapeError(f"slice_volume expects a 3-D volume, got shape {data.shape}")
    return np.ascontiguousarray(np.moveaxis(data, View(view).axis, 0))


def stack_slices(slices: np.ndarray, view: View) -> np.ndarray:
    """Inverse of slice_volume; trailing axes beyond the slice plane are kept."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(slices), 0, View(view).axis))


def normalize_intensity(v: ArrayOrVolume) -> np.ndarray:
    data = _array(v).astype(np.float64)
    std = data.std()
    centred = data - data.mean()
    return centred / std if std > 0 else centred


def sagittal_merge_labels(labels: ArrayOrVolume, label_space: LabelSpace) -> np.ndarray:
    data = _array(labels)
    return label_space.merge_map[data]


def sagittal_expand_probs(p_merged: Union[np.ndarray, ProbVolume], label_space: LabelSpace) -> np.ndarray:
    """Copy each merged class probability to every class that merges into it.

    The result is not a simplex: paired channels are double counted.
    """
    data = _array(p_merged)
    if data.shape[-1] != label_space.num_merged_classes:
        raise ShapeError(f"expected {label_space.num_merged_classes} merged classes, got {data.shape[-1]}")
    return data[..., label_space.merge_map]


def aggregate(
    p_axial: Union[np.ndarray, ProbVolume],
    p_coronal: Union[np.ndarray, ProbVolume],
    p_sagittal: Union[np.ndarray, ProbVolume],
    weights: Optional[AggregationWeights] = None,
) -> np.ndarray:
    """Per-voxel argmax of the weighted probability sum; ties go to the lowest class."""
    weights = weights or AggregationWeights()
    ax, cor, sag = (_array(p) for p in (p_axial, p_coronal, p_sagittal))
    if not ax.shape == cor.shape == sag.shape:
        raise ShapeError(f"probability volumes differ in shape: {ax.shape}, {cor.shape}, {sag.shape}")
    scores = weights.axial * ax + weights.coronal * cor + weights.sagittal * sag
    return argmax_channels(scores, axis=-1)


def combine_views(
    probs: Mapping[View, np.ndarray],
    label_space: LabelSpace,
    weights: Optional[AggregationWeights] = None,
) -> np.ndarray:
    """Aggregate whichever views are available; sagittal maps are expanded first."""
    if not probs:
        raise ShapeError("no view probabilities to combine")
    weights = weights or AggregationWeights()
    full = {
        view: sagittal_expand_probs(p, label_space) if view is View.SAGITTAL else p
        for view, p in probs.items()
    }
    if len(full) == 1:
        return argmax_channels(next(iter(full.values())), axis=-1)
    shape = next(iter(full.values())).shape
    missing = np.zeros(shape)
    picked = [full.get(v, missing) for v in (View.AXIAL, View.CORONAL, View.SAGITTAL)]
    if any(p.shape != shape for p in picked):
        raise ShapeError("view probability volumes differ in shape")
    return aggregate(*picked, weights=weights)


def predict_view(net: ViewNetwork, volume: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Eval-mode probabilities (D,H,W,N) of one view network over a normalised volume."""
    slices = slice_volume(volume, net.view)[:, None]
    padded, crop = pad_to_multiple(slices, SPATIAL_MULTIPLE, axes=(2, 3))
    probs = predict_probs(net, padded, batch_size=batch_size)[crop]
    return stack_slices(np.moveaxis(probs, 1, -1), net.view)


def view_probabilities(
    nets: Sequence[ViewNetwork],
    volume: ArrayOrVolume,
    batch_size: int = 4,
    concurrent: bool = False,
) -> Dict[View, np.ndarray]:
    normalised = normalize_intensity(volume)
    if concurrent and len(nets) > 1:
        with ThreadPoolExecutor(max_workers=len(nets)) as pool:
            results = list(pool.map(lambda n: predict_view(n, normalised, batch_size), nets))
    else:
        results = [predict_view(n, normalised, batch_size) for n in nets]
    return {net.view: probs for net, probs in zip(nets, results)}


def segment_volume(
    nets: Sequence[ViewNetwork],
    volume: ArrayOrVolume,
    label_space: LabelSpace,
    weights: Optional[AggregationWeights] = None,
    batch_size: int = 4,
    concurrent: bool = False,
) -> LabelVolume:
    views = [n.view for n in nets]
    if len(set(views)) != len(views):
        raise ShapeError(f"duplicate view networks: {[v.value for v in views]}")
    for net in nets:
        expected = label_space.num_classes_for(net.view)
        if net.num_classes != expected:
            raise ShapeError(f"{net.view.value} network emits {net.num_classes} classes, label space needs {expected}")
    start = time.perf_counter()
    probs = view_probabilities(nets, volume, batch_size=batch_size, concurrent=concurrent)
    labels = combine_views(probs, label_space, weights)
    elapsed = time.perf_counter() - start
    logger.info("[segment] views=%s shape=%s seconds=%.2f", ",".join(v.value for v in views), labels.shape, elapsed)
    spacing = volume.spacing if isinstance(volume, Volume) else (1.0, 1.0, 1.0)
    return LabelVolume(data=labels.astype(np.int64), spacing=spacing)
