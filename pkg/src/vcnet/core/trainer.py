"""
Training harness: Adam, flip/rotation augmentation, the composite loss that
couples classification with the V1 prediction error, and the epoch loop.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..utils.threads import ShardPool, weighted_sum
from .errors import ConfigError, ShapeError
from .graph import ForwardOutput, StreamGraph, bind_parameters, forward
from .ops import softmax_cross_entropy
from .tensor import DTYPE, Tape, Tensor, add, mean, mul, scale

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_ce", "train_pred_penalty", "train_acc",
                  "val_acc", "wall_seconds")


# -------------------------------------------------------------
# Adam
# -------------------------------------------------------------
@dataclass(frozen=True)
class AdamState:
    m: Mapping[str, np.ndarray]
    v: Mapping[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        """Zero moments for every parameter, step counter at 0."""
        zeros = {k: np.zeros_like(p, dtype=DTYPE) for k, p in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, t=0,
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise ShapeError(f"adam_step: parameter and gradient names differ ({', '.join(missing[:3])})")
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=DTYPE)
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"adam_step: {k} has shape {p.shape}, gradient {g.shape}, "
                             f"moment {state.m[k].shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        new_params[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_params, dataclasses.replace(state, m=new_m, v=new_v, t=t)


# -------------------------------------------------------------
# Loss
# -------------------------------------------------------------
@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cross_entropy: float
    prediction_penalty: float
    lam: float


def composite_loss(output: ForwardOutput, labels, lam: float) -> Tuple[Tensor, LossBreakdown]:
    """cross_entropy(logits, labels) + lam * mean(epsilon^2)."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    ce = softmax_cross_entropy(output.logits, labels)
    eps = output.epsilon.epsilon
    penalty = mean(mul(eps, eps))
    total = add(ce, scale(penalty, lam))
    return total, LossBreakdown(total.item(), ce.item(), penalty.item(), float(lam))


# -------------------------------------------------------------
# Augmentation
# -------------------------------------------------------------
@dataclass(frozen=True)
class AugmentationConfig:
    flip_probability: float = 0.5
    rotation_range_degrees: float = 15.0

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip probability must be in [0, 1], got {self.flip_probability}")
        if self.rotation_range_degrees < 0:
            raise ConfigError(f"rotation range must be >= 0, got {self.rotation_range_degrees}")


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < 1e-9, nearest, coords)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the centre, bilinear, zero fill.

    Same orientation as np.rot90(image, axes=(-2, -1)) at 90 degrees.
    """
    image = np.asarray(image, dtype=DTYPE)
    h, w = image.shape[-2:]
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    y, x = np.mgrid[0:h, 0:w].astype(DTYPE)
    dy, dx = y - cy, x - cx
    src_y = _snap(cy + cos * dy + sin * dx)
    src_x = _snap(cx - sin * dy + cos * dx)

    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = src_y - y0
    wx = src_x - x0
    out = np.zeros(image.shape, dtype=DTYPE)
    for oy, ox, weight in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                           (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (weight > 0)
        contrib = np.where(inside, weight, 0.0)
        out += image[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)] * contrib
    return out


def augment(sample: Tensor, rng: np.random.Generator,
            config: AugmentationConfig = AugmentationConfig()) -> Tensor:
    """Random horizontal flip, then a random rotation in +/- range degrees."""
    data = sample.data if isinstance(sample, Tensor) else np.asarray(sample, dtype=DTYPE)
    if data.ndim != 3 or data.shape[1] != data.shape[2]:
        raise ShapeError(f"augment needs a square [C, H, W] sample, got {data.shape}")
    # both draws always happen so the stream position does not depend on outcomes
    flip = rng.random() < config.flip_probability
    angle = rng.uniform(-config.rotation_range_degrees, config.rotation_range_degrees)
    if flip:
        data = data[..., ::-1]
    if angle != 0.0:
        data = rotate(data, angle)
    return Tensor(data)


# -------------------------------------------------------------
# Gradients
# -------------------------------------------------------------
class BatchResult(NamedTuple):
    loss: LossBreakdown
    gradients: Dict[str, np.ndarray]
    correct: int


def count_correct(logits: np.ndarray, labels) -> int:
    """Rows of ``logits`` whose argmax equals the label."""
    return int(np.sum(np.argmax(np.asarray(logits), axis=1) == np.asarray(labels).reshape(-1)))


def loss_and_gradients(graph: StreamGraph, images: np.ndarray, labels: np.ndarray,
                       lam: float) -> BatchResult:
    """Forward + composite loss + backward for one (sub-)batch on a fresh tape."""
    with Tape() as tape:
        params = bind_parameters(graph)
        output = forward(graph, Tensor(images), params)
        total, breakdown = composite_loss(output, labels, lam)
        tape.backward(total)
        grads = {name: tape.gradient(p).data for name, p in params.items()}
    correct = count_correct(output.logits.data, labels)
    return BatchResult(breakdown, grads, correct)


def sharded_loss_and_gradients(graph: StreamGraph, images: np.ndarray, labels: np.ndarray,
                               lam: float, pool: ShardPool) -> BatchResult:
    """Data-parallel loss_and_gradients; shards reduced in order with weights n_i / N."""
    results = pool.map(lambda a, b: loss_and_gradients(graph, images[a:b], labels[a:b], lam),
                       len(labels))
    if len(results) == 1:
        return results[0][1]
    n = len(labels)
    grads = {k: np.zeros_like(v) for k, v in graph.parameters.items()}
    for size, result in results:
        for k, g in result.gradients.items():
            grads[k] += g * (size / n)
    loss = LossBreakdown(
        total=weighted_sum([(s, r.loss.total) for s, r in results]),
        cross_entropy=weighted_sum([(s, r.loss.cross_entropy) for s, r in results]),
        prediction_penalty=weighted_sum([(s, r.loss.prediction_penalty) for s, r in results]),
        lam=float(lam))
    return BatchResult(loss, grads, sum(r.correct for _, r in results))


# -------------------------------------------------------------
# Epoch loop
# -------------------------------------------------------------
@dataclass(frozen=True)
class EpochMetrics:
    loss: LossBreakdown
    accuracy: float
    steps: int
    samples: int


class EvalResult(NamedTuple):
    accuracy: float
    loss: float


def _stack(dataset: Sequence, indices) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([dataset[i].pixels.data for i in indices])
    labels = np.array([dataset[i].label for i in indices], dtype=np.int64)
    return images, labels


def train_epoch(graph: StreamGraph, dataset: Sequence, adam: AdamState, aug: AugmentationConfig,
                lam: float, rng: np.random.Generator, batch_size: int = 16,
                workers: int = 1) -> Tuple[StreamGraph, AdamState, EpochMetrics]:
    """One shuffled pass; the final partial batch is trained too."""
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    order = rng.permutation(len(dataset))
    sums = np.zeros(3)
    correct = steps = 0
    with ShardPool(workers) as pool:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            images = np.stack([augment(dataset[i].pixels, rng, aug).data for i in idx])
            labels = np.array([dataset[i].label for i in idx], dtype=np.int64)
            result = sharded_loss_and_gradients(graph, images, labels, lam, pool)
            params, adam = adam_step(graph.parameters, result.gradients, adam)
            graph = graph.with_parameters(params)
            sums += len(idx) * np.array([result.loss.total, result.loss.cross_entropy,
                                         result.loss.prediction_penalty])
            correct += result.correct
            steps += 1
    n = len(dataset)
    total, ce, penalty = (float(v) for v in sums / n)
    return graph, adam, EpochMetrics(LossBreakdown(total, ce, penalty, float(lam)), correct / n, steps, n)


def evaluate(graph: StreamGraph, dataset: Sequence, batch_size: int = 64) -> EvalResult:
    """Accuracy and mean cross-entropy, no augmentation and no updates."""
    if not dataset:
        raise ConfigError("cannot evaluate an empty dataset")
    correct = 0
    ce_sum = 0.0
    for start in range(0, len(dataset), batch_size):
        images, labels = _stack(dataset, range(start, min(start + batch_size, len(dataset))))
        logits = forward(graph, Tensor(images)).logits
        ce_sum += softmax_cross_entropy(logits, labels).item() * len(labels)
        correct += count_correct(logits.data, labels)
    return EvalResult(correct / len(dataset), ce_sum / len(dataset))


# -------------------------------------------------------------
# fit
# -------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lam: float = 0.1
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    workers: int = 1
    eval_batch_size: int = 64
    record_wall_clock: bool = True


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_ce: float
    train_pred_penalty: float
    train_acc: float
    val_acc: float
    wall_seconds: float

    def as_row(self) -> List[str]:
        return [str(self.epoch)] + [f"{getattr(self, k):.8f}" for k in METRICS_HEADER[1:]]


@dataclass
class FitResult:
    graph: StreamGraph
    adam: AdamState
    history: List[EpochRecord]


def training_rng(seed: int) -> np.random.Generator:
    """Shuffle/augmentation stream, independent of the parameter-init stream."""
    return np.random.default_rng([seed, 1])


def fit(graph: StreamGraph, train: Sequence, val: Optional[Sequence], config: TrainConfig, seed: int,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> FitResult:
    """Train for config.epochs; emits one EpochRecord per epoch through ``on_epoch``."""
    if config.epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {config.epochs}")
    rng = training_rng(seed)
    adam = AdamState.fresh(graph.parameters, lr=config.learning_rate, beta1=config.beta1,
                           beta2=config.beta2, eps=config.adam_epsilon)
    history: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        graph, adam, metrics = train_epoch(graph, train, adam, config.augmentation, config.lam, rng,
                                           batch_size=config.batch_size, workers=config.workers)
        val_acc = evaluate(graph, val, config.eval_batch_size).accuracy if val else float("nan")
        wall = time.perf_counter() - started if config.record_wall_clock else 0.0
        record = EpochRecord(epoch, metrics.loss.total, metrics.loss.cross_entropy,
                             metrics.loss.prediction_penalty, metrics.accuracy, val_acc, wall)
        history.append(record)
        logger.info("epoch %d/%d loss=%.4f ce=%.4f pen=%.4f acc=%.3f val_acc=%.3f",
                    epoch, config.epochs, record.train_loss, record.train_ce,
                    record.train_pred_penalty, record.train_acc, record.val_acc)
        if on_epoch is not None:
            on_epoch(record)
    return FitResult(graph, adam, history)
