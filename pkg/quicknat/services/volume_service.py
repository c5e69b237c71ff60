"""NIfTI-1 volume I/O (single-file, uncompressed subset) and label remapping."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import nibabel as nib
import numpy as np
import pandas as pd

from quicknat.core.config import settings
from quicknat.core.exceptions import DataError
from quicknat.core.logging import get_logger
from quicknat.db.storage import atomic_path
from quicknat.models.volumes import LabelVolume, RemapRow, Volume

logger = get_logger(__name__)

GZIP_MAGIC = b"\x1f\x8b"
NIFTI_MAGIC = b"n+1"
SUPPORTED_DATATYPES: Dict[int, np.dtype] = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
CORTEX_COLLAPSE_THRESHOLD = 100
CORTEX_RIGHT, CORTEX_LEFT = 210, 211

Scheme = Literal["freesurfer", "manual", "quicknat"]


# ---------------------------------------------------------------- NIfTI

def _check_header(path: Path) -> Tuple[nib.Nifti1Header, int]:
    with open(path, "rb") as fh:
        if fh.read(2) == GZIP_MAGIC:
            raise DataError(f"{path}: gzip-compressed NIfTI is not supported (field: file compression)")
        fh.seek(0)
        try:
            header = nib.Nifti1Header.from_fileobj(fh, check=False)
        except Exception as e:  # nibabel raises a mix of HeaderDataError / ValueError here
            raise DataError(f"{path}: unreadable NIfTI-1 header (field: sizeof_hdr): {e}") from e
    magic = bytes(header["magic"]).rstrip(b"\x00")
    if magic != NIFTI_MAGIC:
        raise DataError(f"{path}: wrong magic {magic!r}, expected single-file 'n+1' (field: magic)")
    datatype = int(header["datatype"])
    if datatype not in SUPPORTED_DATATYPES:
        raise DataError(f"{path}: unsupported datatype code {datatype} (field: datatype); use uint8, int16 or float32")
    shape = header.get_data_shape()
    if len(shape) != 3:
        raise DataError(f"{path}: expected a 3-D volume, dims give {shape} (field: dim)")
    needed = int(header["vox_offset"]) + int(np.prod(shape)) * SUPPORTED_DATATYPES[datatype].itemsize
    if path.stat().st_size < needed:
        raise DataError(f"{path}: payload shorter than dims imply ({path.stat().st_size} < {needed} bytes)")
    return header, datatype


def read_volume(path: Path) -> Volume:
    path = Path(path)
    if path.name.endswith(".gz"):
        raise DataError(f"{path}: gzip-compressed NIfTI is not supported (field: file compression)")
    if not path.is_file():
        raise DataError(f"volume not found: {path}")
    header, datatype = _check_header(path)
    img = nib.load(str(path))
    data = np.asarray(img.dataobj.get_unscaled())
    if data.dtype != SUPPORTED_DATATYPES[datatype]:
        data = data.astype(SUPPORTED_DATATYPES[datatype])
    spacing = tuple(float(z) for z in header.get_zooms()[:3])
    return Volume(data=data, spacing=spacing)


def read_label_volume(path: Path) -> LabelVolume:
    volume = read_volume(path)
    data = volume.data
    if not np.issubdtype(data.dtype, np.integer):
        if not np.array_equal(data, np.round(data)):
            raise DataError(f"{path}: label volume holds non-integer values (field: datatype)")
        data = data.astype(np.int64)
    try:
        return LabelVolume(data=data, spacing=volume.spacing)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def _storable(data: np.ndarray) -> np.ndarray:
    if data.dtype in SUPPORTED_DATATYPES.values():
        return data
    if np.issubdtype(data.dtype, np.integer):
        lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
        if 0 <= lo and hi <= np.iinfo(np.uint8).max:
            return data.astype(np.uint8)
        if np.iinfo(np.int16).min <= lo and hi <= np.iinfo(np.int16).max:
            return data.astype(np.int16)
        raise DataError(f"labels {lo}..{hi} do not fit int16 (field: datatype)")
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    raise DataError(f"cannot store dtype {data.dtype} (field: datatype)")


def write_volume(v: Union[Volume, np.ndarray], path: Path, spacing: Optional[Tuple[float, float, float]] = None) -> Path:
    """Write an uncompressed single-file NIfTI-1 volume atomically."""
    path = Path(path)
    if path.name.endswith(".gz"):
        raise DataError(f"{path}: gzip-compressed output is not supported")
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    spacing = spacing or (v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0))
    data = _storable(data)
    img = nib.Nifti1Image(data, np.diag([*spacing, 1.0]))
    img.header.set_data_dtype(data.dtype)
    img.header.set_zooms(spacing)
    with atomic_path(path, suffix=".nii") as tmp:
        nib.save(img, str(tmp))
    logger.debug("[volume] wrote %s shape=%s dtype=%s", path, data.shape, data.dtype)
    return path


# ---------------------------------------------------------------- remapping

def load_remap_table(path: Optional[Path] = None) -> List[RemapRow]:
    path = Path(path or settings.REMAP_TABLE_PATH)
    if not path.is_file():
        raise DataError(f"remap table not found: {path}")
    frame = pd.read_csv(path)
    missing = {"structure", "quicknat", "freesurfer", "manual"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: remap table lacks columns {sorted(missing)}")
    for column in ("quicknat", "freesurfer", "manual"):
        duplicated = frame[column][frame[column].duplicated()].tolist()
        if duplicated:
            raise DataError(f"{path}: ids {duplicated} repeated in column {column}")
    return [RemapRow(**record) for record in frame.to_dict(orient="records")]


@lru_cache(maxsize=1)
def _default_table() -> Tuple[RemapRow, ...]:
    return tuple(load_remap_table())


def collapse_cortical_parcels(data: np.ndarray) -> np.ndarray:
    """Manual-scheme ids above 100: even -> 210 (right cortex), odd -> 211 (left cortex)."""
    out = data.copy()
    high = data > CORTEX_COLLAPSE_THRESHOLD
    out[high & (data % 2 == 0)] = CORTEX_RIGHT
    out[high & (data % 2 == 1)] = CORTEX_LEFT
    return out


def remap_labels(
    v: Union[LabelVolume, np.ndarray],
    scheme: Scheme,
    table: Optional[List[RemapRow]] = None,
) -> LabelVolume:
    """Map source-scheme ids to QuickNAT ids; unlisted ids become background."""
    data = np.asarray(v.data if isinstance(v, LabelVolume) else v).astype(np.int64)
    spacing = v.spacing if isinstance(v, LabelVolume) else (1.0, 1.0, 1.0)
    rows = list(table) if table is not None else list(_default_table())
    if scheme == "quicknat":
        lookup = {row.quicknat: row.quicknat for row in rows}
    elif scheme == "freesurfer":
        lookup = {row.freesurfer: row.quicknat for row in rows}
    elif scheme == "manual":
        data = collapse_cortical_parcels(data)
        lookup = {row.manual: row.quicknat for row in rows}
    else:
        raise DataError(f"unknown label scheme {scheme!r}")
    lookup[0] = 0

    ids, inverse = np.unique(data, return_inverse=True)
    mapped = np.array([lookup.get(int(i), 0) for i in ids], dtype=np.int64)
    unlisted = {int(i): int(c) for i, c in zip(ids, np.bincount(inverse.reshape(-1))) if int(i) not in lookup}
    if unlisted:
        logger.warning("[remap] scheme=%s unlisted ids mapped to background: %s", scheme, unlisted)
    return LabelVolume(data=mapped[inverse].reshape(data.shape), spacing=spacing)
