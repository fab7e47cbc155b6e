"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A ``Tape`` records every op applied to tracked tensors while it is active;
``Tape.backward`` walks the records in reverse and accumulates gradients for
the leaves registered with ``Tape.watch``. Broadcasting is limited to the
leading batch dimension (or a scalar operand).
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12

Array = np.ndarray
Shape = Tuple[int, ...]
TensorLike = Union["Tensor", float, int, Sequence[float], np.ndarray]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable value carrier. ``node`` is set when the tensor lives on a tape."""

    __slots__ = ("_data", "_tape", "_node")

    def __init__(self, data: Any, *, _tape: Optional["Tape"] = None, _node: Optional[int] = None, _trusted: bool = False):
        arr = np.asarray(data, dtype=np.float64) if _trusted else np.array(data, dtype=np.float64)
        if not _trusted and not np.all(np.isfinite(arr)):
            raise DomainError(f"Tensor input contains NaN or Inf (shape {arr.shape})")
        arr.setflags(write=False)
        self._data = arr
        self._tape = _tape
        self._node = _node

    @property
    def data(self) -> Array:
        return self._data

    @property
    def shape(self) -> Shape:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def node(self) -> Optional[int]:
        return self._node

    @property
    def requires_grad(self) -> bool:
        return self._node is not None

    def numpy(self) -> Array:
        return np.array(self._data)

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self._data, _trusted=True)

    def __repr__(self) -> str:
        tracked = f", node={self._node}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other: TensorLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: TensorLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: TensorLike) -> "Tensor":
        return add(self, neg(other))

    def __rsub__(self, other: TensorLike) -> "Tensor":
        return add(other, neg(self))

    def __mul__(self, other: TensorLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: TensorLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    op: str
    inputs: Tuple[Optional[int], ...]
    saved: Dict[str, Any]
    shape: Shape


_state = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    if getattr(_state, "paused", 0):
        return None
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording; forward values are unchanged."""
    _state.paused = getattr(_state, "paused", 0) + 1
    try:
        yield
    finally:
        _state.paused -= 1


class Tape:
    """Append-only record of one forward pass. Rebuilt every iteration."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}
        self._backward_done = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def reset(self) -> None:
        self.nodes = []
        self.leaves = {}
        self._backward_done = False

    def watch(self, value: TensorLike, name: str) -> Tensor:
        if name in self.leaves:
            raise TapeError(f"Leaf '{name}' is already watched on this tape")
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        checked = Tensor(arr)
        idx = len(self.nodes)
        self.nodes.append(Node(op="leaf", inputs=(), saved={"name": name}, shape=checked.shape))
        self.leaves[name] = idx
        return Tensor(checked.data, _tape=self, _node=idx, _trusted=True)

    def watch_all(self, values: Mapping[str, Any]) -> Dict[str, Tensor]:
        return {name: self.watch(v, name) for name, v in values.items()}

    def record(self, op: str, inputs: Sequence[Tensor], saved: Dict[str, Any], out: Array) -> Tensor:
        ids: List[Optional[int]] = []
        for t in inputs:
            if t.node is not None and t._tape is not self:
                raise TapeError(f"{op}: input was recorded on a different tape")
            ids.append(t.node)
        idx = len(self.nodes)
        self.nodes.append(Node(op=op, inputs=tuple(ids), saved=saved, shape=out.shape))
        return Tensor(out, _tape=self, _node=idx, _trusted=True)

    def backward(self, root: Tensor) -> Dict[str, Array]:
        """Gradients of scalar ``root`` for every watched leaf (zeros when unreachable)."""
        if not self.nodes:
            raise TapeError("backward called on an empty tape")
        if self._backward_done:
            raise TapeError("backward already ran on this tape; call reset() first")
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root.node is None or root._tape is not self:
            raise TapeError("root is not recorded on this tape")
        self._backward_done = True

        grads: List[Optional[Array]] = [None] * len(self.nodes)
        grads[root.node] = np.ones(root.shape)
        for idx in range(root.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.op == "leaf":
                continue
            input_grads = OPS[node.op].backward(g, node.saved)
            for src, ig in zip(node.inputs, input_grads):
                if src is None or ig is None:
                    continue
                grads[src] = ig if grads[src] is None else grads[src] + ig

        out: Dict[str, Array] = {}
        for name, idx in self.leaves.items():
            g = grads[idx]
            out[name] = np.zeros(self.nodes[idx].shape) if g is None else g
        return out


# ---------------------------------------------------------------------------
# Op registry


class Op:
    """One differentiable primitive: forward returns (value, saved), backward maps
    the output gradient to one gradient per input (None for non-differentiable)."""

    name = ""

    def forward(self, *arrays: Array, **attrs: Any) -> Tuple[Array, Dict[str, Any]]:
        raise NotImplementedError

    def backward(self, grad: Array, saved: Dict[str, Any]) -> Tuple[Optional[Array], ...]:
        raise NotImplementedError


OPS: Dict[str, Op] = {}


def register(op_cls: type) -> type:
    OPS[op_cls.name] = op_cls()
    return op_cls


def _broadcast_shape(op: str, a: Shape, b: Shape) -> Shape:
    if a == b:
        return a
    if b == () or (len(a) == len(b) + 1 and a[1:] == b):
        return a
    if a == () or (len(b) == len(a) + 1 and b[1:] == a):
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform (only the leading batch dimension broadcasts)")


def _unbroadcast(grad: Array, shape: Shape) -> Array:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.sum(axis=0)


@register
class Add(Op):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a + b, {"a_shape": a.shape, "b_shape": b.shape}

    def backward(self, grad, saved):
        return _unbroadcast(grad, saved["a_shape"]), _unbroadcast(grad, saved["b_shape"])


@register
class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a * b, {"a": a, "b": b}

    def backward(self, grad, saved):
        a, b = saved["a"], saved["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


@register
class Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a, {}

    def backward(self, grad, saved):
        return (-grad,)


@register
class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        return a @ b, {"a": a, "b": b}

    def backward(self, grad, saved):
        a, b = saved["a"], saved["b"]
        return grad @ b.T, a.T @ grad


@register
class Exp(Op):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        return out, {"out": out}

    def backward(self, grad, saved):
        return (grad * saved["out"],)


@register
class Log(Op):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0.0):
            raise DomainError(f"log: {int(np.sum(a <= 0.0))} non-positive entries (min {a.min():.3g}); clamp before taking logs")
        clamped = np.maximum(a, LOG_FLOOR)
        return np.log(clamped), {"x": clamped, "inside": a >= LOG_FLOOR}

    def backward(self, grad, saved):
        return (np.where(saved["inside"], grad / saved["x"], 0.0),)


@register
class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, a):
        out = expit(a)
        return out, {"out": out}

    def backward(self, grad, saved):
        s = saved["out"]
        return (grad * s * (1.0 - s),)


@register
class Tanh(Op):
    name = "tanh"

    def forward(self, a):
        out = np.tanh(a)
        return out, {"out": out}

    def backward(self, grad, saved):
        return (grad * (1.0 - saved["out"] ** 2),)


@register
class Relu(Op):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0), {"mask": a > 0.0}

    def backward(self, grad, saved):
        return (grad * saved["mask"],)


@register
class Softplus(Op):
    name = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a), {"a": a}

    def backward(self, grad, saved):
        return (grad * expit(saved["a"]),)


@register
class LogSigmoid(Op):
    name = "log_sigmoid"

    def forward(self, a):
        return -np.logaddexp(0.0, -a), {"a": a}

    def backward(self, grad, saved):
        return (grad * expit(-saved["a"]),)


@register
class Clip(Op):
    name = "clip"

    def forward(self, a, low: float = -np.inf, high: float = np.inf):
        if low > high:
            raise ValueError(f"clip: low {low} exceeds high {high}")
        return np.clip(a, low, high), {"mask": (a >= low) & (a <= high)}

    def backward(self, grad, saved):
        return (grad * saved["mask"],)


def _axis_tuple(axis: Optional[int], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return (axis % ndim,)


@register
class Sum(Op):
    name = "sum"

    def forward(self, a, axis: Optional[int] = None):
        axes = _axis_tuple(axis, a.ndim)
        return a.sum(axis=axes), {"shape": a.shape, "axes": axes}

    def backward(self, grad, saved):
        g = np.expand_dims(grad, saved["axes"]) if saved["axes"] else grad
        return (np.broadcast_to(g, saved["shape"]).copy(),)


@register
class Mean(Op):
    name = "mean"

    def forward(self, a, axis: Optional[int] = None):
        axes = _axis_tuple(axis, a.ndim)
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        return a.mean(axis=axes), {"shape": a.shape, "axes": axes, "count": count}

    def backward(self, grad, saved):
        g = np.expand_dims(grad, saved["axes"]) if saved["axes"] else grad
        return (np.broadcast_to(g / saved["count"], saved["shape"]).copy(),)


@register
class Broadcast(Op):
    name = "broadcast"

    def forward(self, a, shape: Shape = ()):
        shape = tuple(shape)
        if not (a.shape == () or a.shape == shape[1:] or a.shape == shape):
            raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape} (leading batch dimension only)")
        return np.broadcast_to(a, shape).copy(), {"a_shape": a.shape}

    def backward(self, grad, saved):
        return (_unbroadcast(grad, saved["a_shape"]),)


@register
class Reshape(Op):
    name = "reshape"

    def forward(self, a, shape: Shape = ()):
        shape = tuple(shape)
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
        return a.reshape(shape), {"a_shape": a.shape}

    def backward(self, grad, saved):
        return (grad.reshape(saved["a_shape"]),)


@register
class Concat(Op):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        first = arrays[0]
        ax = _axis_tuple(axis, first.ndim)[0]
        for other in arrays[1:]:
            if other.ndim != first.ndim or any(
                other.shape[i] != first.shape[i] for i in range(first.ndim) if i != ax
            ):
                raise ShapeError(f"concat: shapes {first.shape} and {other.shape} do not conform on axis {ax}")
        sizes = [arr.shape[ax] for arr in arrays]
        return np.concatenate(arrays, axis=ax), {"axis": ax, "splits": np.cumsum(sizes)[:-1]}

    def backward(self, grad, saved):
        return tuple(np.split(grad, saved["splits"], axis=saved["axis"]))


@register
class Slice(Op):
    name = "slice"

    def forward(self, a, axis: int = 0, start: int = 0, stop: Optional[int] = None):
        ax = _axis_tuple(axis, a.ndim)[0]
        stop = a.shape[ax] if stop is None else stop
        if not 0 <= start < stop <= a.shape[ax]:
            raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {ax} of shape {a.shape}")
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, stop)
        return a[tuple(index)], {"a_shape": a.shape, "index": tuple(index)}

    def backward(self, grad, saved):
        out = np.zeros(saved["a_shape"])
        out[saved["index"]] = grad
        return (out,)


def forward_op(op: str, *inputs: TensorLike, **attrs: Any) -> Tensor:
    """Apply a registered op; the result is recorded when any input is tracked."""
    rule = OPS.get(op)
    if rule is None:
        raise KeyError(f"Unknown op '{op}'; registered: {sorted(OPS)}")
    tensors = [as_tensor(t) for t in inputs]
    out, saved = rule.forward(*(t.data for t in tensors), **attrs)
    tape = active_tape()
    if tape is not None and any(t.node is not None for t in tensors):
        return tape.record(op, tensors, saved, np.asarray(out, dtype=np.float64))
    return Tensor(out, _trusted=True)


def backward(tape: Tape, root: Tensor) -> Dict[str, Array]:
    return tape.backward(root)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("add", a, b)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("mul", a, b)


def neg(a: TensorLike) -> Tensor:
    return forward_op("neg", a)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    return forward_op("matmul", a, b)


def exp(a: TensorLike) -> Tensor:
    return forward_op("exp", a)


def log(a: TensorLike) -> Tensor:
    return forward_op("log", a)


def sigmoid(a: TensorLike) -> Tensor:
    return forward_op("sigmoid", a)


def tanh(a: TensorLike) -> Tensor:
    return forward_op("tanh", a)


def relu(a: TensorLike) -> Tensor:
    return forward_op("relu", a)


def softplus(a: TensorLike) -> Tensor:
    return forward_op("softplus", a)


def log_sigmoid(a: TensorLike) -> Tensor:
    return forward_op("log_sigmoid", a)


def clip(a: TensorLike, low: float, high: float) -> Tensor:
    return forward_op("clip", a, low=low, high=high)


def sum(a: TensorLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return forward_op("sum", a, axis=axis)


def mean(a: TensorLike, axis: Optional[int] = None) -> Tensor:
    return forward_op("mean", a, axis=axis)


def broadcast(a: TensorLike, shape: Shape) -> Tensor:
    return forward_op("broadcast", a, shape=tuple(shape))


def reshape(a: TensorLike, shape: Shape) -> Tensor:
    return forward_op("reshape", a, shape=tuple(shape))


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    return forward_op("concat", *tensors, axis=axis)


def slice_(a: TensorLike, start: int, stop: Optional[int] = None, axis: int = 0) -> Tensor:
    return forward_op("slice", a, axis=axis, start=start, stop=stop)


# ---------------------------------------------------------------------------
# Gradient checking


def central_difference(fn: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of scalar ``fn`` at ``x``."""
    x0 = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        f_plus = fn(x0)
        flat[j] = orig - h
        f_minus = fn(x0)
        flat[j] = orig
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    analytic: Dict[str, Array]
    numeric: Dict[str, Array]
    max_rel_err: float
    max_abs_err: float
    passed: bool
    worst: Optional[str] = None
    details: Dict[str, float] = field(default_factory=dict)


def gradcheck(
    fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Mapping[str, Array],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    An entry passes when its absolute error is within ``atol`` or its relative
    error (against the larger magnitude of the two estimates) is within ``rtol``.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    with Tape() as tape:
        watched = tape.watch_all(values)
        root = fn(watched)
    analytic = tape.backward(root)

    numeric: Dict[str, Array] = {}
    max_rel = 0.0
    max_abs = 0.0
    passed = True
    worst = None
    details: Dict[str, float] = {}
    for name, value in values.items():

        def _f(arr: Array, name: str = name) -> float:
            feed = {k: Tensor(arr if k == name else v) for k, v in values.items()}
            with no_grad():
                return fn(feed).item()

        num = central_difference(_f, value, h=h)
        numeric[name] = num
        abs_err = np.abs(analytic[name] - num)
        scale = np.maximum(np.abs(analytic[name]), np.abs(num))
        rel_err = np.where(scale > 0, abs_err / np.where(scale > 0, scale, 1.0), 0.0)
        ok = (abs_err <= atol) | (rel_err <= rtol)
        relevant = np.where(abs_err > atol, rel_err, 0.0)
        details[name] = float(relevant.max()) if relevant.size else 0.0
        if details[name] > max_rel:
            max_rel, worst = details[name], name
        max_abs = max(max_abs, float(abs_err.max()) if abs_err.size else 0.0)
        passed = passed and bool(np.all(ok))
    if not passed:
        logger.debug("gradcheck failed; worst input %s rel err %.3g", worst, max_rel)
    return GradCheckReport(analytic, numeric, max_rel, max_abs, passed, worst, details)
