"""Differentiable ops used by the segmentation network.

Layout is batch x channels x height x width. Convolution is cross-correlation
with zero same-padding; max-pool ties go to the lowest flat index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from quicknat.core.exceptions import ShapeError
from quicknat.engine.tensor import Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D tensor (B,C,H,W), got shape {x.shape}")


def _windows(padded: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B, C, H, W, kh, kw) view over a padded input
    return sliding_window_view(padded, (kh, kw), axis=(2, 3))


# ---------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g: np.ndarray):
        return (g * mask,)

    return record("relu", (x,), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")

    def backward(g: np.ndarray):
        return g * b.data, g * a.data

    return record("mul", (a, b), a.data * b.data, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g: np.ndarray):
        return g, g

    return record("add", (a, b), a.data + b.data, backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g: np.ndarray):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return record("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype), backward)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-D cross-correlation, stride 1."""
    _require_4d(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (Cout,Cin,kH,kW), got {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: same padding needs odd kernel extents, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _windows(padded, kh, kw)
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,Cout
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        grad_bias = g.sum(axis=(0, 2, 3))
        grad_kernel = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        g_padded = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        flipped = kernel.data[:, :, ::-1, ::-1]
        grad_x = np.tensordot(_windows(g_padded, kh, kw), flipped, axes=([1, 4, 5], [0, 2, 3]))
        return grad_x.transpose(0, 3, 1, 2), grad_kernel, grad_bias

    return record("conv2d", (x, kernel, bias), np.ascontiguousarray(out, dtype=x.dtype), backward)


# ---------------------------------------------------------------- batch norm

class BatchNormState:
    """Running statistics of one batch-norm layer (inference-time buffers)."""

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray, momentum: float) -> None:
        self.running_mean = (1 - momentum) * self.running_mean + momentum * mean
        self.running_var = (1 - momentum) * self.running_var + momentum * var_unbiased


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    _require_4d(x, "batchnorm2d")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine parameters must have shape ({c},)")
    axes = (0, 2, 3)
    n = b * h * w

    if training:
        if n < 2:
            raise ShapeError("batchnorm2d: training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.update(mean, var * n / (n - 1), momentum)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def backward(g: np.ndarray):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        g_hat = g * gamma.data[None, :, None, None]
        if training:
            grad_x = (
                inv_std[None, :, None, None]
                / n
                * (
                    n * g_hat
                    - g_hat.sum(axis=axes)[None, :, None, None]
                    - x_hat * (g_hat * x_hat).sum(axis=axes)[None, :, None, None]
                )
            )
        else:
            grad_x = g_hat * inv_std[None, :, None, None]
        return grad_x, grad_gamma, grad_beta

    return record("batchnorm2d", (x, gamma, beta), out.astype(x.dtype, copy=False), backward)


# ---------------------------------------------------------------- pooling

@dataclass(frozen=True)
class PoolIndices:
    """Flat (row * W + col) index of the winning input cell per pooled cell."""

    flat: np.ndarray  # int64, shape (B, C, H/2, W/2)
    input_shape: Tuple[int, int, int, int]

    def validate(self) -> None:
        b, c, h, w = self.input_shape
        if self.flat.shape != (b, c, h // 2, w // 2):
            raise ShapeError(f"pool indices shape {self.flat.shape} does not match input {self.input_shape}")
        rows, cols = np.divmod(self.flat, w)
        win_r = np.arange(h // 2)[None, None, :, None]
        win_c = np.arange(w // 2)[None, None, None, :]
        if np.any(rows // 2 != win_r) or np.any(cols // 2 != win_c):
            raise ShapeError("pool indices point outside their 2x2 windows")


def maxpool2x2(x: Tensor) -> Tuple[Tensor, PoolIndices]:
    _require_4d(x, "maxpool2x2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial size {h}x{w} must be even; pad the input upstream")
    # window order (0,0),(0,1),(1,0),(1,1) is increasing flat index, so argmax
    # picking the first maximum breaks ties to the lowest index
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[None, None, :, None] + winner // 2
    cols = 2 * np.arange(w // 2)[None, None, None, :] + winner % 2
    indices = PoolIndices(flat=(rows * w + cols).astype(np.int64), input_shape=(b, c, h, w))

    def backward(g: np.ndarray):
        grad_x = np.zeros((b, c, h * w), dtype=g.dtype)
        np.put_along_axis(grad_x, indices.flat.reshape(b, c, -1), g.reshape(b, c, -1), axis=2)
        return (grad_x.reshape(b, c, h, w),)

    return record("maxpool2x2", (x,), np.ascontiguousarray(out), backward), indices


def unpool2x2(x: Tensor, indices: PoolIndices) -> Tensor:
    _require_4d(x, "unpool2x2")
    b, c, h, w = indices.input_shape
    if x.shape != indices.flat.shape:
        raise ShapeError(f"unpool2x2: input shape {x.shape} does not match pool indices {indices.flat.shape}")
    indices.validate()
    flat = indices.flat.reshape(b, c, -1)
    out = np.zeros((b, c, h * w), dtype=x.dtype)
    np.put_along_axis(out, flat, x.data.reshape(b, c, -1), axis=2)

    def backward(g: np.ndarray):
        gathered = np.take_along_axis(g.reshape(b, c, -1), flat, axis=2)
        return (gathered.reshape(x.shape),)

    return record("unpool2x2", (x,), out.reshape(b, c, h, w), backward)


# ---------------------------------------------------------------- channels

def concat_channels(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels: nothing to concatenate")
    for t in tensors:
        _require_4d(t, "concat_channels")
    b, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (b, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match batch/spatial size {(b, h, w)}")
    if len(tensors) == 1:
        return tensors[0]
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=1))

    return record("concat_channels", tuple(tensors), np.concatenate([t.data for t in tensors], axis=1), backward)


def softmax_channels(x: Tensor) -> Tensor:
    _require_4d(x, "softmax_channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return record("softmax_channels", (x,), probs, backward)


def argmax_channels(probs: np.ndarray, axis: int = 1) -> np.ndarray:
    """Per-pixel argmax; numpy returns the first maximum, i.e. the lowest class id."""
    return np.argmax(probs, axis=axis)


def pad_to_multiple(x: np.ndarray, multiple: int, axes: Tuple[int, int]) -> Tuple[np.ndarray, Tuple[slice, ...]]:
    """Zero-pad the given axes symmetrically; returns the padded array and a crop."""
    pads = [(0, 0)] * x.ndim
    crop = [slice(None)] * x.ndim
    for axis in axes:
        size = x.shape[axis]
        total = (-size) % multiple
        before = total // 2
        pads[axis] = (before, total - before)
        crop[axis] = slice(before, before + size)
    return np.pad(x, pads), tuple(crop)

