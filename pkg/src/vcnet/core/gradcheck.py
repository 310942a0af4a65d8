"""
Finite-difference verification of the backward rules.

Every check compares the tape gradient of a scalar function against the
central difference (f(x+h) - f(x-h)) / 2h at 64-bit precision. Coordinates
whose perturbation changes a relu/max selection (the tape's branch
signature) are skipped: the function is not differentiable across them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .blocks import (CBAMBlock, ConvStageBlock, LateralBlock, MultiScaleV1Block, NeuromodBlock,
                     RecurrentBlock, TopDownBlock, predictive_error)
from .graph import ModelConfig, build_model, forward
from .ops import ConvSpec, conv2d, dense, depthwise_separable, pool, softmax_cross_entropy, upsample_nearest
from .tensor import DTYPE, Tape, Tensor, mul, sum_all
from .trainer import composite_loss

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-5

ScalarFn = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_parameter: str
    checked: int
    skipped: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(1, |a|); absolute near zero, relative elsewhere."""
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def _evaluate(fn: ScalarFn, values: Mapping[str, np.ndarray]) -> Tuple[float, Tuple[str, ...]]:
    # an active tape without watched inputs records branches but no nodes
    with Tape() as tape:
        out = fn({k: Tensor(v) for k, v in values.items()})
    return out.item(), tape.branch_signature()


def analytic_gradients(fn: ScalarFn, values: Mapping[str, np.ndarray]
                       ) -> Tuple[Dict[str, np.ndarray], Tuple[str, ...]]:
    """Tape gradients of ``fn`` plus the branch signature of the pass."""
    with Tape() as tape:
        tracked = tape.watch_all(values)
        loss = fn(tracked)
        signature = tape.branch_signature()
        tape.backward(loss)
        grads = {k: tape.gradient(t).data for k, t in tracked.items()}
    return grads, signature


def check_gradients(name: str, fn: ScalarFn, values: Mapping[str, np.ndarray],
                    rng: np.random.Generator, max_coordinates: Optional[int] = None,
                    h: float = STEP, tolerance: float = TOLERANCE) -> GradCheckReport:
    """Compare tape and central-difference gradients of ``fn`` at ``values``.

    With ``max_coordinates`` set, that many coordinates are drawn uniformly
    over all inputs (more are drawn to replace skipped ones); otherwise every
    coordinate is checked.
    """
    values = {k: np.array(v, dtype=DTYPE) for k, v in values.items()}
    grads, base_signature = analytic_gradients(fn, values)

    names = list(values)
    sizes = np.array([values[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if max_coordinates is None:
        candidates = np.arange(offsets[-1])
        wanted = len(candidates)
    else:
        candidates = rng.permutation(offsets[-1])
        wanted = min(max_coordinates, len(candidates))

    worst, worst_path = 0.0, ""
    checked = skipped = 0
    for flat in candidates:
        if checked >= wanted:
            break
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = names[which]
        index = np.unravel_index(int(flat - offsets[which]), values[key].shape)
        original = values[key][index]
        values[key][index] = original + h
        plus, sig_plus = _evaluate(fn, values)
        values[key][index] = original - h
        minus, sig_minus = _evaluate(fn, values)
        values[key][index] = original
        if sig_plus != base_signature or sig_minus != base_signature:
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * h)
        err = relative_error(float(grads[key][index]), numeric)
        checked += 1
        if err >= worst:
            worst, worst_path = err, f"{key}[{','.join(str(int(i)) for i in index)}]"

    report = GradCheckReport(name, worst, worst_path, checked, skipped, tolerance)
    logger.debug("gradcheck %s: max rel err %.3e at %s (%d checked, %d skipped)",
                 name, worst, worst_path, checked, skipped)
    return report


# -------------------------------------------------------------
# Suite
# -------------------------------------------------------------
def _projected(apply: Callable[[Mapping[str, Tensor]], Tensor], values: Mapping[str, np.ndarray],
               rng: np.random.Generator) -> ScalarFn:
    """sum(apply(params) * R) for a fixed random R, so every output element matters."""
    probe = apply({k: Tensor(v) for k, v in values.items()})
    weights = Tensor(rng.normal(size=probe.shape))
    return lambda params: sum_all(mul(apply(params), weights))


def _block_case(block, x_shape, rng, **call_kwargs):
    values = {"input": rng.normal(size=x_shape)}
    values.update(block.initial_values(rng))
    # move gains and biases off their neutral initial values
    for key, value in values.items():
        if key != "input":
            values[key] = value + rng.normal(scale=0.1, size=value.shape)

    def apply(params):
        own = {k: v for k, v in params.items() if k != "input"}
        return block(params["input"], own, **call_kwargs)
    return values, apply


def block_cases(rng: np.random.Generator) -> List[Tuple[str, Dict[str, np.ndarray], Callable]]:
    """Small instances of every cortical block plus the strided/pooling ops."""
    cases = []
    for name, block, shape, kwargs in (
            ("conv_stage", ConvStageBlock(2, 3), (2, 2, 6, 6), {}),
            ("multi_scale_v1", MultiScaleV1Block(2, 6), (2, 2, 8, 8), {}),
            ("recurrent", RecurrentBlock(3, 3), (2, 3, 5, 5), {}),
            ("cbam", CBAMBlock(6, 3), (2, 6, 6, 6), {}),
            ("lateral", LateralBlock(3), (2, 3, 5, 5), {}),
            ("neuromod", NeuromodBlock(3), (2, 3, 4, 4), {}),
            ("top_down", TopDownBlock(4, 3), (2, 4, 3, 3), {"target_hw": (7, 7)}),
    ):
        values, apply = _block_case(block, shape, rng, **kwargs)
        cases.append((name, values, apply))

    pe_values = {"bottom_up": rng.normal(size=(2, 3, 4, 4)), "top_down": rng.normal(size=(2, 3, 4, 4))}
    cases.append(("predictive_error", pe_values,
                  lambda p: predictive_error(p["bottom_up"], p["top_down"]).epsilon))

    conv_values = {"input": rng.normal(size=(2, 4, 7, 7)), "weight": rng.normal(size=(6, 2, 3, 3)),
                   "bias": rng.normal(size=6)}
    cases.append(("conv2d_strided_grouped", conv_values,
                  lambda p: conv2d(p["input"], p["weight"], p["bias"], ConvSpec(3, 3, stride=2, padding=1, groups=2))))
    dw_values = {"input": rng.normal(size=(2, 3, 6, 6)), "dw": rng.normal(size=(3, 1, 5, 5)),
                 "pw": rng.normal(size=(4, 3, 1, 1))}
    cases.append(("depthwise_separable", dw_values,
                  lambda p: depthwise_separable(p["input"], p["dw"], p["pw"], spec=ConvSpec.square(5, padding=2, groups=3))))
    pool_values = {"input": rng.normal(size=(2, 3, 6, 6))}
    cases.append(("avg_pool", dict(pool_values), lambda p: pool(p["input"], "avg", 2, 2)))
    cases.append(("max_pool", dict(pool_values), lambda p: pool(p["input"], "max", 3, 1)))
    cases.append(("upsample_nearest", {"input": rng.normal(size=(2, 2, 3, 4))},
                  lambda p: upsample_nearest(p["input"], (7, 9))))
    dense_values = {"input": rng.normal(size=(3, 5)), "weight": rng.normal(size=(5, 4)), "bias": rng.normal(size=4)}
    cases.append(("dense", dense_values, lambda p: dense(p["input"], p["weight"], p["bias"])))
    return cases


def check_blocks(rng: np.random.Generator, h: float = STEP, tolerance: float = TOLERANCE) -> List[GradCheckReport]:
    reports = []
    for name, values, apply in block_cases(rng):
        fn = _projected(apply, values, rng)
        reports.append(check_gradients(name, fn, values, rng, h=h, tolerance=tolerance))
    labels = rng.integers(0, 4, size=3)
    reports.append(check_gradients("softmax_cross_entropy",
                                   lambda p: softmax_cross_entropy(p["logits"], labels),
                                   {"logits": rng.normal(size=(3, 4))}, rng, h=h, tolerance=tolerance))
    return reports


def check_model(seed: int = 0, samples: int = 10, lam: float = 0.1, extent: int = 16,
                batch: int = 2, h: float = STEP, tolerance: float = TOLERANCE) -> GradCheckReport:
    """Mini-variant forward + composite loss at ``samples`` random parameter coordinates."""
    rng = np.random.default_rng([seed, 2])
    config = ModelConfig.for_variant("mini", height=extent, width=extent)
    graph = build_model(config, seed=seed)
    images = Tensor(rng.uniform(0.0, 1.0, size=(batch,) + config.input_shape))
    labels = rng.integers(0, config.num_classes, size=batch)

    def loss(params):
        total, _ = composite_loss(forward(graph, images, params), labels, lam)
        return total
    return check_gradients("model[mini]", loss, graph.parameters, rng, max_coordinates=samples,
                           h=h, tolerance=tolerance)


def run_suite(seed: int = 0, model_samples: int = 10, h: float = STEP,
              tolerance: float = TOLERANCE) -> List[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = check_blocks(rng, h=h, tolerance=tolerance)
    reports.append(check_model(seed=seed, samples=model_samples, h=h, tolerance=tolerance))
    for report in reports:
        level = logging.INFO if report.passed else logging.ERROR
        logger.log(level, "%-24s max rel err %.3e (%s)", report.name, report.max_rel_error,
                   report.worst_parameter or "-")
    return reports


def failures(reports: Sequence[GradCheckReport]) -> List[GradCheckReport]:
    return [r for r in reports if not r.passed]
