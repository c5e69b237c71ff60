"""QuickNAT view network: 4 dense encoders, bottleneck, 4 dense decoders, classifier.

Parameters live in a flat, hierarchically named dict, e.g.
`encoder1.conv2.weight` or `decoder3.bn1.gamma`; batch-norm running
statistics live next to them under the same layer prefix.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from quicknat.core.exceptions import ShapeError
from quicknat.core.logging import get_logger
from quicknat.engine.ops import (
    BatchNormState,
    PoolIndices,
    argmax_channels,
    batchnorm2d,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    softmax_channels,
    unpool2x2,
)
from quicknat.engine.tensor import Tensor
from quicknat.models.network import NetworkPreset
from quicknat.models.volumes import View

logger = get_logger(__name__)

DEPTH = 4
SPATIAL_MULTIPLE = 2 ** DEPTH
ENCODERS = [f"encoder{i}" for i in range(1, DEPTH + 1)]
DECODERS = [f"decoder{i}" for i in range(1, DEPTH + 1)]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor


@dataclass
class DenseBlockParams:
    prefix: str
    bn1: BatchNormParams
    conv1: ConvParams
    bn2: BatchNormParams
    conv2: ConvParams
    bn3: BatchNormParams
    conv3: ConvParams

    @property
    def in_channels(self) -> int:
        return self.conv1.weight.shape[1]

    def validate(self) -> None:
        out = self.conv1.weight.shape[0]
        k1, k2, k3 = (c.weight.shape[2:] for c in (self.conv1, self.conv2, self.conv3))
        if k1[0] == 1 or k2[0] == 1 or tuple(k3) != (1, 1):
            raise ShapeError(f"{self.prefix}: conv1/conv2 must be spatial, conv3 must be 1x1")
        if self.conv2.weight.shape[1] != self.in_channels + out or self.conv3.weight.shape[1] != self.in_channels + 2 * out:
            raise ShapeError(f"{self.prefix}: dense connection widths are inconsistent")
        if {c.weight.shape[0] for c in (self.conv1, self.conv2, self.conv3)} != {out}:
            raise ShapeError(f"{self.prefix}: all three convolutions must output {out} channels")


class NetworkParameters:
    """Learnable tensors plus batch-norm buffers of one view network."""

    def __init__(self, preset: NetworkPreset, tensors: Dict[str, Tensor], bn_states: Dict[str, BatchNormState]):
        self.preset = preset
        self.tensors = tensors
        self.bn_states = bn_states

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def batchnorm(self, prefix: str) -> BatchNormParams:
        return BatchNormParams(self.tensors[f"{prefix}.gamma"], self.tensors[f"{prefix}.beta"], self.bn_states[prefix])

    def conv(self, prefix: str) -> ConvParams:
        return ConvParams(self.tensors[f"{prefix}.weight"], self.tensors[f"{prefix}.bias"])

    def dense_block(self, prefix: str) -> DenseBlockParams:
        return DenseBlockParams(
            prefix=prefix,
            bn1=self.batchnorm(f"{prefix}.bn1"),
            conv1=self.conv(f"{prefix}.conv1"),
            bn2=self.batchnorm(f"{prefix}.bn2"),
            conv2=self.conv(f"{prefix}.conv2"),
            bn3=self.batchnorm(f"{prefix}.bn3"),
            conv3=self.conv(f"{prefix}.conv3"),
        )

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for prefix, state in self.bn_states.items():
            out[f"{prefix}.running_mean"] = state.running_mean
            out[f"{prefix}.running_var"] = state.running_var
        return out

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        for prefix, state in self.bn_states.items():
            state.running_mean = np.array(buffers[f"{prefix}.running_mean"])
            state.running_var = np.array(buffers[f"{prefix}.running_var"])

    def snapshot(self) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        return {k: t.data.copy() for k, t in self.tensors.items()}, copy.deepcopy(self.buffers())

    def restore(self, snapshot: Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]) -> None:
        values, buffers = snapshot
        for name, value in values.items():
            self.tensors[name].data = value.copy()
        self.load_buffers(buffers)


class ViewNetwork:
    def __init__(self, params: NetworkParameters, view: View, training: bool = False):
        expected = params.preset.num_classes
        if params["classifier.weight"].shape[0] != expected:
            raise ShapeError(f"classifier emits {params['classifier.weight'].shape[0]} classes, preset says {expected}")
        view = View(view)
        if not params.preset.fits_view(view):
            space = params.preset.label_space
            raise ShapeError(
                f"a {view.value} network in the {space.name} label space has "
                f"{space.num_classes_for(view)} classes, not {expected}"
            )
        self.params = params
        self._view = view
        self.training = training

    @property
    def view(self) -> View:
        return self._view

    @property
    def num_classes(self) -> int:
        return self.params.preset.num_classes

    def train(self) -> "ViewNetwork":
        self.training = True
        return self

    def eval(self) -> "ViewNetwork":
        self.training = False
        return self


def _layout(preset: NetworkPreset) -> List[Tuple[str, Tuple[int, ...]]]:
    """(name, shape) of every learnable tensor in deterministic order."""
    c, k, n = preset.num_channels, preset.kernel_size, preset.num_classes
    layout: List[Tuple[str, Tuple[int, ...]]] = []

    def block(prefix: str, cin: int) -> None:
        widths = [cin, cin + c, cin + 2 * c]
        kernels = [k, k, 1]
        for i, (width, ks) in enumerate(zip(widths, kernels), start=1):
            layout.append((f"{prefix}.bn{i}.gamma", (width,)))
            layout.append((f"{prefix}.bn{i}.beta", (width,)))
            layout.append((f"{prefix}.conv{i}.weight", (c, width, ks, ks)))
            layout.append((f"{prefix}.conv{i}.bias", (c,)))

    for i, name in enumerate(ENCODERS):
        block(name, preset.in_channels if i == 0 else c)
    layout.append(("bottleneck.conv.weight", (c, c, k, k)))
    layout.append(("bottleneck.conv.bias", (c,)))
    layout.append(("bottleneck.bn.gamma", (c,)))
    layout.append(("bottleneck.bn.beta", (c,)))
    for name in DECODERS:
        block(name, 2 * c)  # unpooled features + encoder skip
    layout.append(("classifier.weight", (n, c, 1, 1)))
    layout.append(("classifier.bias", (n,)))
    return layout


def init_params(seed: int, preset: NetworkPreset, dtype=np.float64) -> NetworkParameters:
    """Fan-in scaled normal weights, unit BN gamma, zero beta and biases."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    bn_states: Dict[str, BatchNormState] = {}
    for name, shape in _layout(preset):
        if name.endswith(".gamma"):
            value = np.ones(shape)
            bn_states[name.rsplit(".", 1)[0]] = BatchNormState(shape[0])
        elif name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            if name == "classifier.weight":
                std = preset.classifier_gain * np.sqrt(1.0 / fan_in)
            else:
                std = np.sqrt(2.0 / fan_in)
            value = rng.normal(0.0, std, size=shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    logger.debug("[network] initialised %s preset seed=%d params=%d", preset.name, seed, sum(t.data.size for t in tensors.values()))
    return NetworkParameters(preset, tensors, bn_states)


def _bn_relu_conv(x: Tensor, bn: BatchNormParams, conv: ConvParams, training: bool) -> Tensor:
    h = batchnorm2d(x, bn.gamma, bn.beta, bn.state, training)
    return conv2d(relu(h), conv.weight, conv.bias)


def dense_block(x: Tensor, p: DenseBlockParams, training: bool) -> Tensor:
    p.validate()
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"{p.prefix}: expected {p.in_channels} input channels, got {x.shape[1]}")
    out1 = _bn_relu_conv(x, p.bn1, p.conv1, training)
    out2 = _bn_relu_conv(concat_channels(x, out1), p.bn2, p.conv2, training)
    return _bn_relu_conv(concat_channels(x, out1, out2), p.bn3, p.conv3, training)


def forward(net: ViewNetwork, batch: Tensor) -> Tensor:
    """Slice batch (B,1,H,W) -> per-pixel class probabilities (B,N,H,W)."""
    if batch.data.ndim != 4 or batch.shape[1] != net.params.preset.in_channels:
        raise ShapeError(f"expected a (B,{net.params.preset.in_channels},H,W) slice batch, got {batch.shape}")
    h, w = batch.shape[2:]
    if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
        raise ShapeError(f"slice size {h}x{w} is not divisible by {SPATIAL_MULTIPLE}; pad the input")

    params, training = net.params, net.training
    skips: List[Tuple[Tensor, PoolIndices]] = []
    x = batch
    for name in ENCODERS:
        features = dense_block(x, params.dense_block(name), training)
        x, indices = maxpool2x2(features)
        skips.append((features, indices))

    bottleneck = params.batchnorm("bottleneck.bn")
    x = conv2d(x, params["bottleneck.conv.weight"], params["bottleneck.conv.bias"])
    x = batchnorm2d(x, bottleneck.gamma, bottleneck.beta, bottleneck.state, training)

    for name, (skip, indices) in zip(DECODERS, reversed(skips)):
        x = concat_channels(unpool2x2(x, indices), skip)
        x = dense_block(x, params.dense_block(name), training)

    logits = conv2d(x, params["classifier.weight"], params["classifier.bias"])
    return softmax_channels(logits)


def predict_probs(net: ViewNetwork, slices: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Eval-mode probabilities for a (S,1,H,W) array, batched, no tape."""
    was_training = net.training
    net.eval()
    try:
        chunks = [
            forward(net, Tensor(slices[i : i + batch_size].astype(net.params.dtype, copy=False))).data
            for i in range(0, slices.shape[0], batch_size)
        ]
    finally:
        net.training = was_training
    return np.concatenate(chunks, axis=0)


def predict_labels(net: ViewNetwork, slices: np.ndarray, batch_size: int = 4) -> np.ndarray:
    return argmax_channels(predict_probs(net, slices, batch_size), axis=1)
