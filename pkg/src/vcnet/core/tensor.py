"""
Dense float64 tensors with tape-based reverse-mode differentiation.

A Tape records one node per differentiable operation while it is active
(``with Tape() as tape:``). Tensors registered through ``tape.watch`` carry a
handle into that tape; any operation touching a watched tensor is recorded,
everything else runs untracked. ``tape.backward(loss)`` sweeps the nodes in
reverse and accumulates gradients additively.

Backward rules are plain functions stored in BACKWARD_RULES under the
operation name and looked up during the sweep.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError, VCNetError

DTYPE = np.float64

BackwardRule = Callable[[Dict[str, Any], np.ndarray], Tuple[Optional[np.ndarray], ...]]
BACKWARD_RULES: Dict[str, BackwardRule] = {}

_local = threading.local()


def backward_rule(name: str):
    """Register the backward rule for operation ``name``."""
    def register(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[name] = fn
        return fn
    return register


class Tensor:
    """Immutable N-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "grad_id", "_tape")

    def __init__(self, data, grad_id: Optional[int] = None, tape: Optional["Tape"] = None):
        arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.grad_id = grad_id
        self._tape = tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, grad_id: Optional[int] = None,
              tape: Optional["Tape"] = None) -> "Tensor":
        # arr must be a fresh array nobody else writes to
        out = cls.__new__(cls)
        # keeps 0-d results 0-d
        arr = np.asarray(arr, dtype=DTYPE, order="C")
        arr.setflags(write=False)
        out.data = arr
        out.grad_id = grad_id
        out._tape = tape
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Read-only view of the values."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tracked = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -------------------------------------------------------------
# Tape
# -------------------------------------------------------------
@dataclass
class GradNode:
    """One recorded operation: input handles, output handle, saved state."""
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    saved: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """Append-only record of operations for one forward pass.

    A tape belongs to the thread that created it; each worker uses its own.
    """

    def __init__(self):
        self.nodes: List[GradNode] = []
        self.gradients: Dict[int, Tensor] = {}
        self.branches: List[str] = []
        self._shapes: List[Tuple[int, ...]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _new_handle(self, shape: Tuple[int, ...]) -> int:
        self._shapes.append(tuple(shape))
        return len(self._shapes) - 1

    def handle_of(self, tensor: Tensor) -> Optional[int]:
        if tensor._tape is self:
            return tensor.grad_id
        return None

    def watch(self, value) -> Tensor:
        """Return a tracked copy of ``value`` (Tensor or array)."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        handle = self._new_handle(data.shape)
        return Tensor._wrap(np.array(data, dtype=DTYPE), handle, self)

    def watch_all(self, values: Mapping[str, Any]) -> Dict[str, Tensor]:
        return {name: self.watch(value) for name, value in values.items()}

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor],
               saved: Optional[Dict[str, Any]] = None) -> Tensor:
        handles = tuple(self.handle_of(t) for t in inputs)
        if all(h is None for h in handles):
            return Tensor._wrap(out)
        handle = self._new_handle(out.shape)
        self.nodes.append(GradNode(op, handles, handle, saved or {}))
        return Tensor._wrap(out, handle, self)

    def log_branch(self, mask: np.ndarray) -> None:
        self.branches.append(hashlib.blake2b(np.ascontiguousarray(mask).tobytes(),
                                             digest_size=8).hexdigest())

    def branch_signature(self) -> Tuple[str, ...]:
        """Digests of every relu/max selection taken during the pass."""
        return tuple(self.branches)

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        root = self.handle_of(loss)
        if root is None:
            raise VCNetError("loss was not produced on this tape")

        grads: Dict[int, np.ndarray] = {root: np.ones(loss.shape, dtype=DTYPE)}
        for node in reversed(self.nodes):
            upstream = grads.get(node.output)
            if upstream is None:
                continue
            rule = BACKWARD_RULES[node.op]
            contributions = rule(node.saved, upstream)
            for handle, contribution in zip(node.inputs, contributions):
                if handle is None or contribution is None:
                    continue
                if handle in grads:
                    grads[handle] = grads[handle] + contribution
                else:
                    grads[handle] = np.asarray(contribution, dtype=DTYPE)

        self.gradients = {h: Tensor._wrap(np.array(g, dtype=DTYPE).reshape(self._shapes[h]))
                          for h, g in grads.items()}
        return self.gradients

    def gradient(self, tensor: Tensor) -> Tensor:
        """Gradient of the last backward() loss w.r.t. ``tensor`` (zeros if unreached)."""
        handle = self.handle_of(tensor)
        if handle is not None and handle in self.gradients:
            return self.gradients[handle]
        return Tensor._wrap(np.zeros(tensor.shape, dtype=DTYPE))


def _stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor],
           saved: Optional[Dict[str, Any]] = None) -> Tensor:
    """Wrap ``out`` and record it on the active tape when an input is tracked."""
    tape = active_tape()
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(op, out, inputs, saved)


def log_branch(mask: np.ndarray) -> None:
    tape = active_tape()
    if tape is not None:
        tape.log_branch(mask)


def backward(loss: Tensor) -> Dict[int, Tensor]:
    """Run the reverse sweep on the tape that produced ``loss``."""
    if loss._tape is None:
        raise VCNetError("loss is not tracked on any tape")
    return loss._tape.backward(loss)


# -------------------------------------------------------------
# Elementwise
# -------------------------------------------------------------
def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over broadcast axes so it matches ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b with numpy broadcasting."""
    _broadcast_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), {"a": a.shape, "b": b.shape})


@backward_rule("add")
def _add_backward(saved, g):
    return unbroadcast(g, saved["a"]), unbroadcast(g, saved["b"])


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b with numpy broadcasting."""
    _broadcast_shape(a, b, "sub")
    return record("sub", a.data - b.data, (a, b), {"a": a.shape, "b": b.shape})


@backward_rule("sub")
def _sub_backward(saved, g):
    return unbroadcast(g, saved["a"]), unbroadcast(-g, saved["b"])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product. Both operands are saved for the backward pass."""
    _broadcast_shape(a, b, "mul")
    return record("mul", a.data * b.data, (a, b), {"a": a.data, "b": b.data})


@backward_rule("mul")
def _mul_backward(saved, g):
    a, b = saved["a"], saved["b"]
    return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant; ``factor`` is not differentiated."""
    return record("scale", x.data * factor, (x,), {"factor": float(factor)})


@backward_rule("scale")
def _scale_backward(saved, g):
    return (g * saved["factor"],)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    log_branch(mask)
    return record("relu", np.where(mask, x.data, 0.0), (x,), {"mask": mask})


@backward_rule("relu")
def _relu_backward(saved, g):
    return (np.where(saved["mask"], g, 0.0),)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, computed without overflow for large |x|."""
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", y, (x,), {"y": y})


@backward_rule("sigmoid")
def _sigmoid_backward(saved, g):
    y = saved["y"]
    return (g * y * (1.0 - y),)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, *operands: Tensor, factor: Optional[float] = None) -> Tensor:
    """Dispatch one of add, sub, mul, relu, sigmoid, scale by name."""
    if op == "scale":
        if len(operands) != 1 or factor is None:
            raise ShapeError("scale takes one operand and a factor")
        return scale(operands[0], factor)
    if op not in _ELEMENTWISE:
        raise VCNetError(f"unknown elementwise op: {op}")
    expected = 1 if op in ("relu", "sigmoid") else 2
    if len(operands) != expected:
        raise ShapeError(f"{op} takes {expected} operand(s), got {len(operands)}")
    return _ELEMENTWISE[op](*operands)


# -------------------------------------------------------------
# Shape and reductions
# -------------------------------------------------------------
def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return record("reshape", x.data.reshape(shape), (x,), {"shape": x.shape})


@backward_rule("reshape")
def _reshape_backward(saved, g):
    return (g.reshape(saved["shape"]),)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element as a 0-d tensor."""
    return record("sum_all", np.array(x.data.sum()), (x,), {"shape": x.shape})


@backward_rule("sum_all")
def _sum_all_backward(saved, g):
    return (np.full(saved["shape"], g.item()),)


def mean(x: Tensor) -> Tensor:
    """Mean of every element as a 0-d tensor."""
    return record("mean", np.array(x.data.mean()), (x,), {"shape": x.shape})


@backward_rule("mean")
def _mean_backward(saved, g):
    shape = saved["shape"]
    return (np.full(shape, g.item() / max(1, int(np.prod(shape)))),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", y, (x,), {"y": y, "axis": axis})


@backward_rule("softmax")
def _softmax_backward(saved, g):
    y, axis = saved["y"], saved["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
