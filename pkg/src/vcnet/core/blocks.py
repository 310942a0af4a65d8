"""
Cortical mechanisms as differentiable blocks.

Each mechanism exists twice: as a function of (input, params) that does the
arithmetic, and as a Block object that knows its parameter shapes, how to
initialise them and how to call the function with its own slice of the
parameter mapping.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import ConvSpec, channel_reduce, concat_channels, conv2d, dense, depthwise_separable, pool, upsample_nearest
from .tensor import DTYPE, Tensor, add, mul, relu, reshape, sigmoid, softmax, sub

BlockParams = Mapping[str, Tensor]

V1_KERNELS = (3, 5, 7)


@dataclass(frozen=True)
class PredictionError:
    """Non-negative residual between bottom-up V1 activity and the AIT prediction."""
    epsilon: Tensor

    @property
    def shape(self):
        return self.epsilon.shape


def _require_feature_map(x: Tensor, where: str) -> Tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{where}: feature map must be [N, C, H, W], got {x.shape}")
    return x.shape


def _require_channels(x: Tensor, channels: int, where: str) -> None:
    if x.shape[1] != channels:
        raise ShapeError(f"{where}: expected {channels} input channels, got {x.shape[1]}")


def _same_conv(kernel: int, groups: int = 1) -> ConvSpec:
    return ConvSpec.square(kernel, stride=1, padding=kernel // 2, groups=groups)


def _channel_gain(vector: Tensor, n: int, c: int) -> Tensor:
    return reshape(vector, (n, c, 1, 1))


# -------------------------------------------------------------
# Functional forms
# -------------------------------------------------------------
def conv_stage(x: Tensor, params: BlockParams) -> Tensor:
    """Depthwise-separable 3x3 convolution followed by ReLU."""
    n, c, _, _ = _require_feature_map(x, "conv_stage")
    out = depthwise_separable(x, params["dw_w"], params["pw_w"], (params["dw_b"], params["pw_b"]),
                              _same_conv(3, groups=c))
    return relu(out)


def multi_scale_v1(x: Tensor, params: BlockParams) -> Tensor:
    """Three depthwise-separable branches (3x3, 5x5, 7x7), each ReLU'd, concatenated."""
    _, c, _, _ = _require_feature_map(x, "multi_scale_v1")
    branches = []
    for k in V1_KERNELS:
        p = f"b{k}."
        out = depthwise_separable(x, params[p + "dw_w"], params[p + "pw_w"],
                                  (params[p + "dw_b"], params[p + "pw_b"]), _same_conv(k, groups=c))
        branches.append(relu(out))
    return concat_channels(branches)


def recurrent_block(x: Tensor, params: BlockParams, iterations: int = 3) -> Tensor:
    """z <- relu(conv(z)) + z0, ``iterations`` times, one shared weight set."""
    _require_feature_map(x, "recurrent_block")
    if iterations < 1:
        raise ConfigError(f"recurrent_block: iterations must be >= 1, got {iterations}")
    spec = _same_conv(3)
    z0 = x
    z = x
    for _ in range(iterations):
        z = add(relu(conv2d(z, params["conv_w"], params["conv_b"], spec)), z0)
    return z


def _shared_mlp(v: Tensor, params: BlockParams) -> Tensor:
    hidden = relu(dense(v, params["mlp1_w"], params["mlp1_b"]))
    return dense(hidden, params["mlp2_w"], params["mlp2_b"])


def channel_attention(x: Tensor, params: BlockParams) -> Tensor:
    """sigmoid(MLP(avg) + MLP(max)) as an [N, C, 1, 1] map."""
    n, c, _, _ = x.shape
    avg = reshape(pool(x, "global_avg"), (n, c))
    mx = reshape(pool(x, "global_max"), (n, c))
    return _channel_gain(sigmoid(add(_shared_mlp(avg, params), _shared_mlp(mx, params))), n, c)


def spatial_attention(x: Tensor, params: BlockParams) -> Tensor:
    """sigmoid(conv7x7([mean_c, max_c])) as an [N, 1, H, W] map."""
    stacked = concat_channels([channel_reduce(x, "mean"), channel_reduce(x, "max")])
    return sigmoid(conv2d(stacked, params["spatial_w"], params["spatial_b"], _same_conv(7)))


def cbam(x: Tensor, params: BlockParams, reduction: int) -> Tensor:
    """Channel attention, then spatial attention on the re-weighted map."""
    _, c, _, _ = _require_feature_map(x, "cbam")
    if reduction < 1 or c % reduction:
        raise ConfigError(f"cbam: reduction {reduction} does not divide channels {c}")
    x = mul(x, channel_attention(x, params))
    return mul(x, spatial_attention(x, params))


def lateral_interaction(x: Tensor, params: BlockParams) -> Tensor:
    """x + y * (C * softmax_c(dense(avg(y)))) with y = conv3x3(x)."""
    n, c, _, _ = _require_feature_map(x, "lateral_interaction")
    y = conv2d(x, params["conv_w"], params["conv_b"], _same_conv(3))
    logits = dense(reshape(pool(y, "global_avg"), (n, c)), params["attn_w"], params["attn_b"])
    weights = softmax(logits, axis=1) * float(c)
    return add(x, mul(y, _channel_gain(weights, n, c)))


def predictive_error(bottom_up: Tensor, top_down: Tensor) -> PredictionError:
    """epsilon = relu(bottom_up - top_down)."""
    if bottom_up.shape != top_down.shape:
        raise ShapeError(f"predictive_error: bottom-up shape {bottom_up.shape} "
                         f"!= top-down shape {top_down.shape}")
    return PredictionError(relu(sub(bottom_up, top_down)))


def top_down_projection(ait: Tensor, params: BlockParams, target_hw: Tuple[int, int]) -> Tensor:
    """1x1 projection to V1's channels, then nearest-neighbour upsampling to V1's extent."""
    _require_feature_map(ait, "top_down_projection")
    projected = conv2d(ait, params["proj_w"], params["proj_b"], ConvSpec(1, 1))
    if projected.shape[2:] == tuple(target_hw):
        return projected
    return upsample_nearest(projected, target_hw)


def neuromodulate(x: Tensor, gain: Tensor) -> Tensor:
    """output[n, c, h, w] = gain[c] * x[n, c, h, w]."""
    _, c, _, _ = _require_feature_map(x, "neuromodulate")
    if gain.shape != (c,):
        raise ShapeError(f"neuromodulate: gain length {gain.shape} does not match {c} channels")
    return mul(x, reshape(gain, (1, c, 1, 1)))


# -------------------------------------------------------------
# Block objects
# -------------------------------------------------------------
def fan_in(shape: Tuple[int, ...]) -> int:
    if len(shape) == 4:
        return int(np.prod(shape[1:]))
    if len(shape) == 2:
        return int(shape[0])
    return int(shape[0])


class Block:
    """Parameter layout and call convention shared by every cortical block."""

    kind = "block"

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Parameter name to shape, in checkpoint order."""
        raise NotImplementedError

    def out_channels(self, in_channels: int) -> int:
        """Channel count produced for an input with ``in_channels``."""
        return in_channels

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))

    def initial_values(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Fan-in scaled uniform weights, zero biases, unit gains."""
        values = {}
        for name, shape in self.shapes().items():
            if name == "gain":
                values[name] = np.ones(shape, dtype=DTYPE)
            elif name.endswith("_b"):
                values[name] = np.zeros(shape, dtype=DTYPE)
            else:
                bound = np.sqrt(1.0 / fan_in(shape))
                values[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
        return values

    def __call__(self, x: Tensor, params: BlockParams) -> Tensor:
        raise NotImplementedError


class ConvStageBlock(Block):
    """Channel-changing stage between areas: depthwise 3x3 then pointwise 1x1, ReLU."""
    kind = "conv_stage"

    def __init__(self, in_channels: int, channels: int):
        self.in_channels = in_channels
        self.channels = channels

    def shapes(self):
        c, k = self.in_channels, self.channels
        return {"dw_w": (c, 1, 3, 3), "dw_b": (c,), "pw_w": (k, c, 1, 1), "pw_b": (k,)}

    def out_channels(self, in_channels):
        return self.channels

    def __call__(self, x, params):
        _require_channels(x, self.in_channels, self.kind)
        return conv_stage(x, params)


class MultiScaleV1Block(Block):
    """V1 front end. Three parallel depthwise-separable branches at 3x3, 5x5 and 7x7
    each contribute a third of the output channels.
    """
    kind = "multi_scale_v1"

    def __init__(self, in_channels: int, channels: int):
        if channels % 3:
            raise ConfigError(f"multi_scale_v1: output channels {channels} not divisible by 3")
        self.in_channels = in_channels
        self.channels = channels

    def shapes(self):
        c, per_branch = self.in_channels, self.channels // 3
        shapes = {}
        for k in V1_KERNELS:
            shapes.update({f"b{k}.dw_w": (c, 1, k, k), f"b{k}.dw_b": (c,),
                           f"b{k}.pw_w": (per_branch, c, 1, 1), f"b{k}.pw_b": (per_branch,)})
        return shapes

    def out_channels(self, in_channels):
        return self.channels

    def __call__(self, x, params):
        _require_channels(x, self.in_channels, self.kind)
        return multi_scale_v1(x, params)


class RecurrentBlock(Block):
    """Weight-shared recurrent refinement; keeps the channel count."""
    kind = "recurrent"

    def __init__(self, channels: int, iterations: int = 3):
        if iterations < 1:
            raise ConfigError(f"recurrent_block: iterations must be >= 1, got {iterations}")
        self.channels = channels
        self.iterations = iterations

    def shapes(self):
        c = self.channels
        return {"conv_w": (c, c, 3, 3), "conv_b": (c,)}

    def __call__(self, x, params):
        return recurrent_block(x, params, self.iterations)


class CBAMBlock(Block):
    """Channel then spatial attention. ``reduction`` must divide the channel count."""
    kind = "cbam"

    def __init__(self, channels: int, reduction: int = 4):
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"cbam: reduction {reduction} does not divide channels {channels}")
        self.channels = channels
        self.reduction = reduction

    def shapes(self):
        c, hidden = self.channels, self.channels // self.reduction
        return {"mlp1_w": (c, hidden), "mlp1_b": (hidden,), "mlp2_w": (hidden, c), "mlp2_b": (c,),
                "spatial_w": (1, 2, 7, 7), "spatial_b": (1,)}

    def __call__(self, x, params):
        return cbam(x, params, self.reduction)


class LateralBlock(Block):
    """Residual lateral interaction with softmax channel weighting."""
    kind = "lateral"

    def __init__(self, channels: int):
        self.channels = channels

    def shapes(self):
        c = self.channels
        return {"conv_w": (c, c, 3, 3), "conv_b": (c,), "attn_w": (c, c), "attn_b": (c,)}

    def __call__(self, x, params):
        return lateral_interaction(x, params)


class NeuromodBlock(Block):
    """Per-channel multiplicative gain, initialised to one."""
    kind = "neuromod"

    def __init__(self, channels: int):
        self.channels = channels

    def shapes(self):
        return {"gain": (self.channels,)}

    def __call__(self, x, params):
        return neuromodulate(x, params["gain"])


class TopDownBlock(Block):
    """AIT -> V1 prediction; called with the V1 extent it must reach."""
    kind = "top_down"

    def __init__(self, ait_channels: int, v1_channels: int):
        self.ait_channels = ait_channels
        self.v1_channels = v1_channels

    def shapes(self):
        return {"proj_w": (self.v1_channels, self.ait_channels, 1, 1), "proj_b": (self.v1_channels,)}

    def __call__(self, x, params, target_hw: Optional[Tuple[int, int]] = None):
        return top_down_projection(x, params, target_hw if target_hw is not None else x.shape[2:])
