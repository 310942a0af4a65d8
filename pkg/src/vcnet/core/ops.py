"""
Convolution, pooling, dense and loss operations over Tensor.
All kernels are vectorised numpy (sliding windows + einsum); the nested-loop
oracles they are checked against live in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, ShapeError
from .tensor import DTYPE, Tensor, backward_rule, log_branch, record

Window = Union[int, Tuple[int, int]]


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D cross-correlation."""
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel extents must be positive, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.groups < 1:
            raise ShapeError(f"groups must be positive, got {self.groups}")

    @classmethod
    def square(cls, kernel: int, stride: int = 1, padding: int = 0, groups: int = 1) -> "ConvSpec":
        return cls(kernel, kernel, stride, padding, groups)

    def output_extent(self, extent: int, kernel: int, axis: str = "spatial") -> int:
        out = (extent + 2 * self.padding - kernel) // self.stride + 1
        if extent + 2 * self.padding < kernel or out < 1:
            raise ShapeError(f"{axis} extent {extent} with padding {self.padding} "
                             f"is smaller than kernel {kernel}")
        return out

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        return (self.output_extent(height, self.kernel_h, "height"),
                self.output_extent(width, self.kernel_w, "width"))


def _require_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what} must be rank {rank}, got shape {x.shape}")


def _tap_slices(i: int, j: int, stride: int, out_h: int, out_w: int):
    return (slice(None), slice(None),
            slice(i, i + stride * (out_h - 1) + 1, stride),
            slice(j, j + stride * (out_w - 1) + 1, stride))


# -------------------------------------------------------------
# Convolution
# -------------------------------------------------------------
def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Grouped cross-correlation with zero padding.

    Args:
        input: [N, C, H, W]
        weight: [K, C/groups, kh, kw]
        bias: [K] or None
        spec: kernel size, stride, padding, groups
    """
    _require_rank(input, 4, "conv2d input")
    _require_rank(weight, 4, "conv2d weight")
    n, c, h, w = input.shape
    k = weight.shape[0]
    groups = spec.groups
    if c % groups:
        raise ShapeError(f"conv2d: groups {groups} does not divide input channels {c}")
    if k % groups:
        raise ShapeError(f"conv2d: groups {groups} does not divide output channels {k}")
    if weight.shape[1] != c // groups:
        raise ShapeError(f"conv2d: weight input-channel dimension is {weight.shape[1]}, "
                         f"expected {c // groups}")
    if weight.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"conv2d: weight kernel dimensions {weight.shape[2:]} do not match "
                         f"spec {spec.kernel_h}x{spec.kernel_w}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias dimension is {bias.shape}, expected ({k},)")

    out_h, out_w = spec.output_hw(h, w)
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    cg, kg = c // groups, k // groups

    padded = np.pad(input.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else input.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
    windows = windows.reshape(n, groups, cg, out_h, out_w, kh, kw)
    w_g = weight.data.reshape(groups, kg, cg, kh, kw)

    out = np.einsum("ngchwij,gkcij->ngkhw", windows, w_g, optimize=True).reshape(n, k, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    inputs = (input, weight) if bias is None else (input, weight, bias)
    saved = {"windows": windows, "w_g": w_g, "spec": spec, "in_shape": input.shape,
             "padded_shape": padded.shape, "has_bias": bias is not None}
    return record("conv2d", out, inputs, saved)


@backward_rule("conv2d")
def _conv2d_backward(saved, g):
    spec: ConvSpec = saved["spec"]
    windows, w_g = saved["windows"], saved["w_g"]
    n, c, h, w = saved["in_shape"]
    groups, kg, cg, kh, kw = w_g.shape
    out_h, out_w = g.shape[2], g.shape[3]
    g_g = g.reshape(n, groups, kg, out_h, out_w)

    d_weight = np.einsum("ngkhw,ngchwij->gkcij", g_g, windows, optimize=True).reshape(groups * kg, cg, kh, kw)
    cols = np.einsum("ngkhw,gkcij->ngchwij", g_g, w_g, optimize=True).reshape(n, c, out_h, out_w, kh, kw)
    d_padded = np.zeros(saved["padded_shape"], dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            d_padded[_tap_slices(i, j, spec.stride, out_h, out_w)] += cols[..., i, j]
    p = spec.padding
    d_input = d_padded[:, :, p:p + h, p:p + w]
    if saved["has_bias"]:
        return d_input, d_weight, g.sum(axis=(0, 2, 3))
    return d_input, d_weight


def depthwise_separable(input: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                        biases: Tuple[Optional[Tensor], Optional[Tensor]] = (None, None),
                        spec: Optional[ConvSpec] = None) -> Tensor:
    """Per-channel spatial conv (groups == C) followed by a 1x1 channel mix."""
    _require_rank(input, 4, "depthwise_separable input")
    c = input.shape[1]
    if spec is None:
        spec = ConvSpec(depthwise_weight.shape[2], depthwise_weight.shape[3], groups=c)
    if spec.groups != c:
        raise ShapeError(f"depthwise stage needs groups == channels ({c}), got {spec.groups}")
    if pointwise_weight.ndim != 4 or pointwise_weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be [K, C, 1, 1], got {pointwise_weight.shape}")
    depthwise_bias, pointwise_bias = biases
    hidden = conv2d(input, depthwise_weight, depthwise_bias, spec)
    return conv2d(hidden, pointwise_weight, pointwise_bias, ConvSpec(1, 1))


def depthwise_separable_parameter_count(channels: int, out_channels: int, kernel_h: int,
                                        kernel_w: int, bias: bool = False) -> int:
    count = channels * kernel_h * kernel_w + channels * out_channels
    if bias:
        count += channels + out_channels
    return count


# -------------------------------------------------------------
# Pooling
# -------------------------------------------------------------
def _pair(window: Window) -> Tuple[int, int]:
    if isinstance(window, int):
        return window, window
    return int(window[0]), int(window[1])


def pool(input: Tensor, kind: str, window: Optional[Window] = None,
         stride: Optional[int] = None) -> Tensor:
    """max / avg over windows, or global_max / global_avg down to 1x1."""
    _require_rank(input, 4, "pool input")
    if kind == "global_avg":
        return record("global_avg", input.data.mean(axis=(2, 3), keepdims=True), (input,),
                      {"shape": input.shape})
    if kind == "global_max":
        n, c, h, w = input.shape
        flat = input.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        log_branch(idx)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)
        return record("global_max", out, (input,), {"shape": input.shape, "idx": idx})
    if kind not in ("max", "avg"):
        raise ShapeError(f"unknown pool kind: {kind}")
    if window is None:
        raise ShapeError(f"{kind} pool needs a window")

    wh, ww = _pair(window)
    s = stride if stride is not None else wh
    n, c, h, w = input.shape
    if wh < 1 or ww < 1:
        raise ShapeError(f"pool window {wh}x{ww} is empty")
    if s < 1:
        raise ShapeError(f"pool stride must be positive, got {s}")
    if wh > h or ww > w:
        raise ShapeError(f"pool window {wh}x{ww} exceeds spatial extent {h}x{w}")

    out_h, out_w = (h - wh) // s + 1, (w - ww) // s + 1
    windows = sliding_window_view(input.data, (wh, ww), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
    saved = {"shape": input.shape, "window": (wh, ww), "stride": s}
    if kind == "avg":
        return record("avg_pool", windows.mean(axis=(4, 5)), (input,), saved)

    flat = windows.reshape(n, c, out_h, out_w, wh * ww)
    idx = flat.argmax(axis=4)
    log_branch(idx)
    saved["idx"] = idx
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    return record("max_pool", out, (input,), saved)


@backward_rule("global_avg")
def _global_avg_backward(saved, g):
    n, c, h, w = saved["shape"]
    return (np.broadcast_to(g / (h * w), (n, c, h, w)).copy(),)


@backward_rule("global_max")
def _global_max_backward(saved, g):
    n, c, h, w = saved["shape"]
    d = np.zeros((n, c, h * w), dtype=DTYPE)
    np.put_along_axis(d, saved["idx"][..., None], g.reshape(n, c, 1), axis=2)
    return (d.reshape(n, c, h, w),)


@backward_rule("avg_pool")
def _avg_pool_backward(saved, g):
    wh, ww = saved["window"]
    out_h, out_w = g.shape[2], g.shape[3]
    d = np.zeros(saved["shape"], dtype=DTYPE)
    share = g / (wh * ww)
    for i in range(wh):
        for j in range(ww):
            d[_tap_slices(i, j, saved["stride"], out_h, out_w)] += share
    return (d,)


@backward_rule("max_pool")
def _max_pool_backward(saved, g):
    wh, ww = saved["window"]
    idx = saved["idx"]
    out_h, out_w = g.shape[2], g.shape[3]
    d = np.zeros(saved["shape"], dtype=DTYPE)
    for tap in range(wh * ww):
        i, j = divmod(tap, ww)
        d[_tap_slices(i, j, saved["stride"], out_h, out_w)] += np.where(idx == tap, g, 0.0)
    return (d,)


def channel_reduce(input: Tensor, kind: str) -> Tensor:
    """Mean or max across channels, keeping a singleton channel axis."""
    _require_rank(input, 4, "channel_reduce input")
    if kind == "mean":
        return record("channel_mean", input.data.mean(axis=1, keepdims=True), (input,),
                      {"shape": input.shape})
    if kind == "max":
        idx = input.data.argmax(axis=1)
        log_branch(idx)
        out = np.take_along_axis(input.data, idx[:, None], axis=1)
        return record("channel_max", out, (input,), {"shape": input.shape, "idx": idx})
    raise ShapeError(f"unknown channel reduction: {kind}")


@backward_rule("channel_mean")
def _channel_mean_backward(saved, g):
    shape = saved["shape"]
    return (np.broadcast_to(g / shape[1], shape).copy(),)


@backward_rule("channel_max")
def _channel_max_backward(saved, g):
    d = np.zeros(saved["shape"], dtype=DTYPE)
    np.put_along_axis(d, saved["idx"][:, None], g, axis=1)
    return (d,)


def upsample_nearest(input: Tensor, size: Tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize to ``size``; source index = floor(i * in / out)."""
    _require_rank(input, 4, "upsample input")
    n, c, h, w = input.shape
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample target {size} must be positive")
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    out = input.data[:, :, rows][:, :, :, cols]
    return record("upsample_nearest", out, (input,), {"shape": input.shape, "rows": rows, "cols": cols})


@backward_rule("upsample_nearest")
def _upsample_backward(saved, g):
    d = np.zeros(saved["shape"], dtype=DTYPE)
    np.add.at(d, (slice(None), slice(None), saved["rows"][:, None], saved["cols"][None, :]), g)
    return (d,)


# -------------------------------------------------------------
# Dense, concatenation, loss
# -------------------------------------------------------------
def dense(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map [N, F] x [F, G] + [G]."""
    _require_rank(input, 2, "dense input")
    _require_rank(weight, 2, "dense weight")
    if input.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: inner dimension mismatch, input has {input.shape[1]} "
                         f"features but weight expects {weight.shape[0]}")
    out = input.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias dimension is {bias.shape}, expected ({weight.shape[1]},)")
        out = out + bias.data
    inputs = (input, weight) if bias is None else (input, weight, bias)
    return record("dense", out, inputs, {"x": input.data, "w": weight.data, "has_bias": bias is not None})


@backward_rule("dense")
def _dense_backward(saved, g):
    x, w = saved["x"], saved["w"]
    grads = (g @ w.T, x.T @ g)
    if saved["has_bias"]:
        return grads + (g.sum(axis=0),)
    return grads


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    for t in inputs:
        _require_rank(t, 4, "concat_channels input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != n:
            raise ShapeError(f"concat_channels: batch dimension {t.shape[0]} != {n}")
        if t.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: spatial dimensions {t.shape[2:]} != {(h, w)}")
    sizes = [t.shape[1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=1)
    return record("concat_channels", out, tuple(inputs), {"sizes": sizes})


@backward_rule("concat_channels")
def _concat_backward(saved, g):
    bounds = np.cumsum([0] + saved["sizes"])
    return tuple(g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:]))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    _require_rank(logits, 2, "logits")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise LabelError(f"label {int(bad)} outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    return record("softmax_cross_entropy", np.array(loss), (logits,),
                  {"probs": np.exp(log_probs), "labels": labels})


@backward_rule("softmax_cross_entropy")
def _softmax_ce_backward(saved, g):
    probs, labels = saved["probs"], saved["labels"]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (g.item() / n),)
