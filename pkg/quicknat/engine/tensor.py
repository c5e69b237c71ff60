"""Dense tensors with a tape for reverse-mode differentiation.

Ops in `quicknat.engine.ops` append an entry to the active tape (if any) when
at least one input requires a gradient. `Tape.backward` walks the entries in
exact reverse order and accumulates gradients additively, so a tensor feeding
several consumers receives the sum of its branch gradients.
"""

from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from quicknat.core.exceptions import NumericalError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("quicknat_active_tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        reached: Dict[int, Tensor] = {id(root): root}
        for entry in reversed(self.entries):
            grad_out = pending.pop(id(entry.output), None)
            if grad_out is None:
                continue
            grads_in = entry.backward(grad_out)
            for tensor, grad in zip(entry.inputs, grads_in):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                pending[key] = pending[key] + grad if key in pending else grad
                reached[key] = tensor
        # whatever is left never appeared as an op output: leaves
        for key, grad in pending.items():
            reached[key].accumulate_grad(grad)


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


def record(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap an op result, enforce finiteness and append it to the active tape."""
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op}: non-finite values in output")
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(TapeEntry(op=op, inputs=inputs, output=result, backward=backward))
    return result


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value, dtype=dtype) if dtype is not None else np.asarray(value)
    return Tensor(array)
