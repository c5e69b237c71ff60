"""Checkpoint format: a text manifest followed by one raw little-endian blob.

    QUICKNAT-CHECKPOINT 1
    meta view coronal
    meta preset {"name": "miniature", ...}
    tensor param.encoder1.conv1.weight 8x1x5x5 float32 0 800
    ...
    end
    <blob>

Each tensor row gives name, shape (`x`-joined, `-` for scalars), dtype, byte
offset into the blob and byte length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from quicknat.core.exceptions import DataError
from quicknat.core.logging import get_logger
from quicknat.db.storage import atomic_write_bytes
from quicknat.models.network import NetworkPreset
from quicknat.models.training import OptimizerState
from quicknat.models.volumes import LabelSpace, View
from quicknat.services.network_service import NetworkParameters, ViewNetwork, init_params

logger = get_logger(__name__)

MAGIC = "QUICKNAT-CHECKPOINT 1"
END = "end"
SUPPORTED_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    network: ViewNetwork
    optimizer: Optional[OptimizerState] = None
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def label_space(self) -> LabelSpace:
        if "label_space" not in self.meta:
            raise DataError("checkpoint does not record its label space")
        return LabelSpace.by_name(self.meta["label_space"], int(self.meta.get("label_space_classes", 0)) or None)


def _encode_shape(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _decode_shape(text: str) -> tuple:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def _dtype_name(array: np.ndarray) -> str:
    name = np.dtype(array.dtype).name
    if name not in SUPPORTED_DTYPES:
        raise DataError(f"cannot checkpoint dtype {name}")
    return name


def encode_checkpoint(arrays: Dict[str, np.ndarray], meta: Dict[str, str]) -> bytes:
    lines: List[str] = [MAGIC]
    for key, value in meta.items():
        lines.append(f"meta {key} {value}")
    chunks: List[bytes] = []
    offset = 0
    for name, array in arrays.items():
        dtype = _dtype_name(array)
        payload = np.ascontiguousarray(array, dtype=SUPPORTED_DTYPES[dtype]).tobytes()
        lines.append(f"tensor {name} {_encode_shape(array.shape)} {dtype} {offset} {len(payload)}")
        chunks.append(payload)
        offset += len(payload)
    lines.append(END)
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(chunks)


def decode_checkpoint(raw: bytes, source: str = "<bytes>"):
    marker = f"\n{END}\n".encode("ascii")
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode("ascii")) or cut < 0:
        raise DataError(f"{source}: not a checkpoint (bad magic or missing manifest end)")
    blob = raw[cut + len(marker):]
    meta: Dict[str, str] = {}
    arrays: Dict[str, np.ndarray] = {}
    for line in raw[:cut].decode("ascii").splitlines()[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "tensor":
            name, shape, dtype, offset, length = rest.split(" ")
            offset, length = int(offset), int(length)
            if dtype not in SUPPORTED_DTYPES:
                raise DataError(f"{source}: unsupported dtype {dtype} for {name}")
            if offset + length > len(blob):
                raise DataError(f"{source}: blob shorter than manifest implies for {name}")
            array = np.frombuffer(blob[offset:offset + length], dtype=SUPPORTED_DTYPES[dtype])
            arrays[name] = array.reshape(_decode_shape(shape)).astype(dtype)
        else:
            raise DataError(f"{source}: unknown manifest row {line!r}")
    return arrays, meta


def save_checkpoint(net: ViewNetwork, path: Path, optimizer: Optional[OptimizerState] = None, **extra_meta) -> Path:
    params = net.params
    arrays: Dict[str, np.ndarray] = {f"param.{k}": t.data for k, t in params}
    arrays.update({f"buffer.{k}": v for k, v in params.buffers().items()})
    meta = {"view": net.view.value, "preset": params.preset.model_dump_json()}
    if optimizer is not None:
        arrays.update({f"velocity.{k}": v for k, v in optimizer.velocity.items()})
        meta["optimizer"] = optimizer.model_dump_json(exclude={"velocity"})
    meta.update({k: str(v) for k, v in extra_meta.items()})
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(arrays, meta))
    logger.info("[checkpoint] wrote %s view=%s tensors=%d", path, net.view.value, len(arrays))
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    arrays, meta = decode_checkpoint(path.read_bytes(), source=str(path))
    try:
        preset = NetworkPreset.model_validate_json(meta["preset"])
        view = View(meta["view"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: checkpoint metadata incomplete ({e})") from e

    params: NetworkParameters = init_params(0, preset)
    for name, tensor in params:
        key = f"param.{name}"
        if key not in arrays or arrays[key].shape != tensor.shape:
            raise DataError(f"{path}: missing or mis-shaped tensor {name}")
        tensor.data = arrays[key]
    try:
        params.load_buffers({k[len("buffer."):]: v for k, v in arrays.items() if k.startswith("buffer.")})
    except KeyError as e:
        raise DataError(f"{path}: missing batch-norm buffer {e}") from e

    optimizer = None
    if "optimizer" in meta:
        optimizer = OptimizerState.model_validate_json(meta["optimizer"])
        optimizer.velocity = {k[len("velocity."):]: v for k, v in arrays.items() if k.startswith("velocity.")}
    return Checkpoint(network=ViewNetwork(params, view), optimizer=optimizer, meta=meta)
