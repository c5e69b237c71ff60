"""Finite-difference gradient suite over every op, the dense block, the network and the loss."""

from __future__ import annotations

from typing import Callable, Dict, List

import numpy as np

from quicknat.core.logging import get_logger
from quicknat.engine.gradcheck import GradCheckReport, grad_check
from quicknat.engine.ops import (
    BatchNormState,
    batchnorm2d,
    concat_channels,
    conv2d,
    maxpool2x2,
    mean_all,
    mul,
    relu,
    softmax_channels,
    sum_all,
    unpool2x2,
)
from quicknat.engine.tensor import Tensor
from quicknat.models.network import NetworkPreset
from quicknat.models.volumes import View
from quicknat.services.loss_service import combined_loss
from quicknat.services.network_service import NetworkParameters, ViewNetwork, dense_block, forward, init_params

logger = get_logger(__name__)

LINEAR_TOLERANCE = 1e-5
TOLERANCE = 1e-4


def _projection(shape, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def _network_check(seed: int, rng: np.random.Generator, sample: int) -> GradCheckReport:
    preset = NetworkPreset.miniature(num_classes=3, num_channels=4)
    reference = init_params(seed, preset)
    x = Tensor(rng.normal(size=(2, 1, 16, 16)))
    r = _projection((2, 3, 16, 16), rng)

    def f(t: Dict[str, Tensor]) -> Tensor:
        states = {k: BatchNormState(s.running_mean.size) for k, s in reference.bn_states.items()}
        net = ViewNetwork(NetworkParameters(preset, t, states), View.CORONAL, training=True)
        return sum_all(mul(forward(net, x), r))

    return grad_check(f, {k: v.data for k, v in reference}, tolerance=TOLERANCE, name="network", sample=sample, seed=seed)


def _dense_block_check(seed: int, rng: np.random.Generator, sample: int) -> GradCheckReport:
    preset = NetworkPreset.miniature(num_classes=3, num_channels=4)
    reference = init_params(seed, preset)
    prefix = "encoder2"
    names = [k for k, _ in reference if k.startswith(prefix + ".")]
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))

    def f(t: Dict[str, Tensor]) -> Tensor:
        tensors = {**reference.tensors, **t}
        states = {k: BatchNormState(s.running_mean.size) for k, s in reference.bn_states.items()}
        block = NetworkParameters(preset, tensors, states).dense_block(prefix)
        return mean_all(dense_block(x, block, training=True))

    return grad_check(f, {k: reference[k].data for k in names}, tolerance=TOLERANCE, name="dense_block", sample=sample, seed=seed)


def run_gradient_suite(seed: int = 0, sample: int = 12) -> List[GradCheckReport]:
    """Check every differentiable piece at 64-bit; linear ops use the tighter tolerance."""
    rng = np.random.default_rng(seed)
    reports: List[GradCheckReport] = []

    def check(name: str, f: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, np.ndarray], tolerance: float) -> None:
        report = grad_check(f, params, tolerance=tolerance, name=name, seed=seed)
        logger.debug("[gradcheck] %s max_error=%.2e", name, report.max_error)
        reports.append(report)

    r_conv = _projection((2, 4, 8, 8), rng)
    check(
        "conv2d",
        lambda t: sum_all(mul(conv2d(t["x"], t["kernel"], t["bias"]), r_conv)),
        {"x": rng.normal(size=(2, 3, 8, 8)), "kernel": rng.normal(size=(4, 3, 5, 5)), "bias": rng.normal(size=4)},
        LINEAR_TOLERANCE,
    )

    r_bn = _projection((4, 3, 6, 6), rng)
    check(
        "batchnorm2d",
        lambda t: sum_all(mul(batchnorm2d(t["x"], t["gamma"], t["beta"], BatchNormState(3), training=True), r_bn)),
        {"x": rng.normal(size=(4, 3, 6, 6)), "gamma": rng.normal(size=3), "beta": rng.normal(size=3)},
        TOLERANCE,
    )

    r_relu = _projection((2, 3, 4, 4), rng)
    check("relu", lambda t: sum_all(mul(relu(t["x"]), r_relu)), {"x": _away_from_zero(rng, (2, 3, 4, 4))}, TOLERANCE)

    r_pool = _projection((1, 2, 4, 4), rng)
    check("maxpool2x2", lambda t: sum_all(mul(maxpool2x2(t["x"])[0], r_pool)), {"x": rng.normal(size=(1, 2, 8, 8))}, LINEAR_TOLERANCE)

    _, indices = maxpool2x2(Tensor(rng.normal(size=(1, 2, 8, 8))))
    r_unpool = _projection((1, 2, 8, 8), rng)
    check(
        "unpool2x2",
        lambda t: sum_all(mul(unpool2x2(t["x"], indices), r_unpool)),
        {"x": rng.normal(size=(1, 2, 4, 4))},
        LINEAR_TOLERANCE,
    )

    r_cat = _projection((2, 5, 4, 4), rng)
    check(
        "concat_channels",
        lambda t: sum_all(mul(concat_channels(t["a"], t["b"]), r_cat)),
        {"a": rng.normal(size=(2, 2, 4, 4)), "b": rng.normal(size=(2, 3, 4, 4))},
        LINEAR_TOLERANCE,
    )

    r_soft = _projection((1, 5, 4, 4), rng)
    check("softmax_channels", lambda t: sum_all(mul(softmax_channels(t["x"]), r_soft)), {"x": rng.normal(size=(1, 5, 4, 4))}, TOLERANCE)

    labels = rng.integers(0, 2, size=(1, 4, 4))
    labels[0, 0, 0], labels[0, 0, 1] = 0, 1
    weights = rng.uniform(0.5, 2.0, size=(1, 4, 4))
    check(
        "combined_loss",
        lambda t: combined_loss(softmax_channels(t["logits"]), labels, weights),
        {"logits": rng.normal(size=(1, 2, 4, 4))},
        TOLERANCE,
    )

    reports.append(_dense_block_check(seed, rng, sample))
    reports.append(_network_check(seed, rng, sample))
    return reports


def suite_table(reports: List[GradCheckReport]) -> str:
    lines = [f"{'check':<18} {'max_rel_error':>14} {'tolerance':>10}  status"]
    for r in reports:
        lines.append(f"{r.name:<18} {r.max_error:>14.3e} {r.tolerance:>10.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
