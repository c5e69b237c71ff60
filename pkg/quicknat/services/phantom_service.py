"""Synthetic ellipsoid phantoms and simulated auxiliary-label corruption.

Geometry lives in normalised coordinates u = (i - (G-1)/2) / (G/2) per axis.
Axis 2 is left/right, so the two lobes mirror each other across it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from quicknat.core.exceptions import DataError
from quicknat.core.logging import get_logger
from quicknat.models.volumes import LabelVolume, PhantomSpec, Volume

logger = get_logger(__name__)

MIN_OCCUPANCY = 0.002
MAX_CORRUPTION_RATE = 0.5

# label -> (centre, radii); painted in this order, later labels overwrite
_BASE_GEOMETRY = {
    1: ((0.0, 0.0, 0.0), (0.8, 0.75, 0.85)),
    2: ((0.0, 0.1, -0.4), (0.22, 0.2, 0.18)),
    3: ((0.0, 0.1, 0.4), (0.22, 0.2, 0.18)),
    4: ((0.0, -0.35, 0.0), (0.2, 0.18, 0.15)),
    5: ((0.4, 0.3, 0.0), (0.22, 0.17, 0.17)),
}
_MIRRORED = {3: 2}

_NEIGHBOUR_SHIFTS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


@dataclass(frozen=True)
class Ellipsoid:
    label: int
    centre: Tuple[float, float, float]
    radii: Tuple[float, float, float]

    def voxel_volume(self, grid_size: int) -> float:
        """Analytic volume in voxels."""
        return 4.0 / 3.0 * np.pi * float(np.prod(self.radii)) * (grid_size / 2.0) ** 3


def phantom_geometry(spec: PhantomSpec) -> List[Ellipsoid]:
    """Jittered ellipsoids of a spec; the mirrored pair shares its jitter."""
    rng = np.random.default_rng(spec.seed)
    scales = {}
    for label in range(1, 6):
        scale = rng.uniform(1 - spec.jitter, 1 + spec.jitter)
        scales[label] = scales[_MIRRORED[label]] if label in _MIRRORED else scale
    return [
        Ellipsoid(label, centre, tuple(r * scales[label] for r in radii))
        for label, (centre, radii) in _BASE_GEOMETRY.items()
        if label < spec.num_classes
    ]


def generate_phantom(spec: Optional[PhantomSpec] = None) -> Tuple[Volume, LabelVolume]:
    spec = spec or PhantomSpec()
    g = spec.grid_size
    u = (np.arange(g) - (g - 1) / 2.0) / (g / 2.0)
    z, y, x = np.meshgrid(u, u, u, indexing="ij")
    labels = np.zeros((g, g, g), dtype=np.int64)
    for shape in phantom_geometry(spec):
        (c0, c1, c2), (r0, r1, r2) = shape.centre, shape.radii
        inside = ((z - c0) / r0) ** 2 + ((y - c1) / r1) ** 2 + ((x - c2) / r2) ** 2 <= 1.0
        labels[inside] = shape.label

    counts = np.bincount(labels.reshape(-1), minlength=spec.num_classes)
    sparse = [int(c) for c in np.flatnonzero(counts / labels.size < MIN_OCCUPANCY)]
    if sparse:
        raise DataError(f"classes {sparse} occupy < {MIN_OCCUPANCY:.1%} of a {g}^3 grid; use a larger grid_size")

    # noise draws come after the geometry draws of the same seed
    rng = np.random.default_rng([spec.seed, 1])
    means = np.asarray(spec.intensities, dtype=np.float64)
    intensity = means[labels] + rng.normal(0.0, spec.noise_sd, size=labels.shape) if spec.noise_sd else means[labels]
    return Volume(data=intensity.astype(np.float32)), LabelVolume(data=labels)


def _neighbour_labels(data: np.ndarray) -> np.ndarray:
    """(6, D, H, W) labels of the face neighbours, edge-replicated at the border."""
    padded = np.pad(data, 1, mode="edge")
    d, h, w = data.shape
    return np.stack([padded[1 + a : 1 + a + d, 1 + b : 1 + b + h, 1 + c : 1 + c + w] for a, b, c in _NEIGHBOUR_SHIFTS])


def corrupt_labels(v: LabelVolume, rate: float, seed: int = 0) -> LabelVolume:
    """Boundary flips plus one-voxel dilation/erosion per structure, each accepted with `rate`.

    Random draws do not depend on `rate`, so corrupted sets are nested as the
    rate grows and rate 0 returns the input unchanged.
    """
    if not 0.0 <= rate <= MAX_CORRUPTION_RATE:
        raise DataError(f"corruption rate must lie in [0, {MAX_CORRUPTION_RATE}], got {rate}")
    data = np.asarray(v.data).astype(np.int64)
    rng = np.random.default_rng(seed)

    neighbours = _neighbour_labels(data)
    differs = neighbours != data[None]
    boundary = differs.any(axis=0)
    priority = np.where(differs, rng.random(differs.shape), -1.0)
    target = np.take_along_axis(neighbours, priority.argmax(axis=0)[None], axis=0)[0]

    out = data.copy()
    connectivity = ndimage.generate_binary_structure(3, 1)
    for label in range(1, int(data.max()) + 1 if data.size else 1):
        dilate = bool(rng.integers(2))
        accept = rng.random(data.shape) < rate
        mask = data == label
        if not mask.any():
            continue
        if dilate:
            ring = ndimage.binary_dilation(mask, structure=connectivity) & ~mask
            out[ring & accept] = label
        else:
            ring = mask & ~ndimage.binary_erosion(mask, structure=connectivity, border_value=1)
            chosen = ring & accept
            out[chosen] = target[chosen]

    flip = boundary & (rng.random(data.shape) < rate)
    out[flip] = target[flip]
    logger.debug("[phantom] corruption rate=%.2f changed=%d voxels", rate, int((out != data).sum()))
    return LabelVolume(data=out, spacing=v.spacing)


@dataclass
class PhantomCase:
    intensity: Volume
    labels: LabelVolume
    aux_labels: LabelVolume


def phantom_cohort(
    n: int,
    seed: int = 0,
    corruption_rate: float = 0.0,
    spec: Optional[PhantomSpec] = None,
) -> List[PhantomCase]:
    """`n` phantoms with seeds derived from `seed`; aux labels are the corrupted copies."""
    base = spec or PhantomSpec()
    cases = []
    for i in range(n):
        case_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        intensity, labels = generate_phantom(base.model_copy(update={"seed": case_seed}))
        aux = corrupt_labels(labels, corruption_rate, seed=case_seed) if corruption_rate else labels
        cases.append(PhantomCase(intensity=intensity, labels=labels, aux_labels=aux))
    return cases
