from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from quicknat.core.exceptions import ShapeError
from quicknat.engine.tensor import Tape, Tensor

TensorFn = Callable[[Dict[str, Tensor]], Tensor]


class GradCheckReport(BaseModel):
    name: str
    tolerance: float
    errors: Dict[str, float] = Field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # max abs deviation, scaled by the larger gradient magnitude of the tensor
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(
    f: TensorFn,
    params: Mapping[str, np.ndarray],
    step: float = 1e-6,
    tolerance: float = 1e-4,
    name: str = "f",
    sample: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar `f` with central finite differences.

    `sample` limits the number of checked elements per tensor (chosen with
    `seed`); the analytic gradient is always computed in full.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    with Tape() as tape:
        out = f(tensors)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: {name} must be scalar-valued, got shape {out.shape}")
    tape.backward(out)

    def evaluate() -> float:
        return f({k: Tensor(v) for k, v in arrays.items()}).item()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(name=name, tolerance=tolerance)
    for key, array in arrays.items():
        analytic = tensors[key].grad
        if analytic is None:
            analytic = np.zeros_like(array)
        flat = array.reshape(-1)
        positions = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            positions = np.sort(rng.choice(flat.size, size=sample, replace=False))
        numeric = np.empty(positions.size)
        for i, pos in enumerate(positions):
            original = flat[pos]
            flat[pos] = original + step
            plus = evaluate()
            flat[pos] = original - step
            minus = evaluate()
            flat[pos] = original
            numeric[i] = (plus - minus) / (2 * step)
        report.errors[key] = _relative_error(analytic.reshape(-1)[positions], numeric)
    return report
