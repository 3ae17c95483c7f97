"""
Reverse-mode automatic differentiation over dense float64 tensors.

Operations on tensors that require gradients are appended to the calling
thread's tape. ``backward(loss)`` walks the tape in reverse creation order,
accumulates gradients for leaf tensors, and clears the tape. Tensor data is
read-only once created, so tensors can be shared between threads; each thread
owns its own tape.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.exceptions import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeNode:
    """One recorded operation: its inputs and vector-Jacobian product."""
    parents: Tuple["Tensor", ...]
    vjp: VJP


class Tape:
    """Ordered computation record for one logical thread."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.generation = 0

    def record(self, parents: Tuple["Tensor", ...], vjp: VJP) -> int:
        self.nodes.append(TapeNode(parents=parents, vjp=vjp))
        return len(self.nodes) - 1

    def clear(self):
        self.nodes.clear()
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    """Return the active tape of the calling thread."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextmanager
def private_tape() -> Iterator[Tape]:
    """Swap in a fresh tape for the enclosed block (per-sample evaluation)."""
    previous = getattr(_local, "tape", None)
    tape = Tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = previous


class Tensor:
    """
    Dense float64 array with optional gradient tracking.

    Args:
        data: Array-like values (copied)
        requires_grad: Whether gradients should be accumulated for this tensor
        name: Optional label used in diagnostics
    """

    __array_ufunc__ = None  # numpy defers to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id: Optional[int] = None
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._generation = -1

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        if array.flags.writeable and array.flags.owndata:
            array.setflags(write=False)
        out.data = array
        out.requires_grad = False
        out.name = None
        out.node_id = None
        out.grad = None
        out._tape = None
        out._generation = -1
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
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self.node_id is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __neg__(self): return neg(self)
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, exponent: float): return power(self, exponent)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis: Optional[int] = None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=np.float64))


def constant(value) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor._wrap(np.array(value, dtype=np.float64))


def _is_live(t: Tensor) -> bool:
    """True when gradients can flow into ``t`` from the current tape."""
    if not t.requires_grad:
        return False
    if t.node_id is None:
        return True
    tape = get_tape()
    return t._tape is tape and t._generation == tape.generation


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled() and any(_is_live(p) for p in parents):
        tape = get_tape()
        out.requires_grad = True
        out.node_id = tape.record(parents, vjp)
        out._tape = tape
        out._generation = tape.generation
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: TensorLike) -> Tensor:
    """Smooth gated activation x * sigmoid(x)."""
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def abs_(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: TensorLike, low: float, high: float) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _make(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (g * take_a, g * ~take_a))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product of 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def stop_gradient(t: TensorLike) -> Tensor:
    """Same values, no gradient flow."""
    return constant(as_tensor(t).data)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Back-propagate a scalar loss through the active tape.

    Args:
        loss: Scalar tensor

    Returns:
        Dict[Tensor, np.ndarray]: Gradient of ``loss`` for every leaf tensor with
        ``requires_grad`` reachable from it. The same arrays are stored on
        ``tensor.grad``. The tape is cleared afterwards.

    Raises:
        UsageError: If ``loss`` is not a scalar
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")

    tape = get_tape()
    leaf_grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    def accumulate_leaf(t: Tensor, g: np.ndarray):
        if id(t) in leaf_grads:
            leaf_grads[id(t)] = (t, leaf_grads[id(t)][1] + g)
        else:
            leaf_grads[id(t)] = (t, np.array(g, dtype=np.float64))

    if loss.node_id is None:
        if loss.requires_grad:
            accumulate_leaf(loss, np.ones_like(loss.data))
    elif _is_live(loss):
        node_grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node_id in range(loss.node_id, -1, -1):
            g = node_grads.pop(node_id, None)
            if g is None:
                continue
            node = tape.nodes[node_id]
            for parent, parent_grad in zip(node.parents, node.vjp(g)):
                if parent_grad is None or not _is_live(parent):
                    continue
                parent_grad = _unbroadcast(np.asarray(parent_grad, dtype=np.float64), parent.shape)
                if parent.node_id is None:
                    accumulate_leaf(parent, parent_grad)
                elif parent.node_id in node_grads:
                    node_grads[parent.node_id] = node_grads[parent.node_id] + parent_grad
                else:
                    node_grads[parent.node_id] = parent_grad
    else:
        raise UsageError("loss was recorded on a tape that has since been cleared")

    logger.debug(f"backward over {len(tape)} tape nodes, {len(leaf_grads)} leaves")
    tape.clear()

    result: Dict[Tensor, np.ndarray] = {}
    for t, g in leaf_grads.values():
        t.grad = g
        result[t] = g
    return result
