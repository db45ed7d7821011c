"""
Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Every differentiable operation in this module
records a node holding its parents and a backward closure whenever at least
one input requires gradients and recording is enabled. `backward` walks the
recorded graph once, in reverse topological order, and releases it.

Two precisions are supported: float32 for training and a float64 verification
mode (`float64_mode`) used by gradient checks.
"""

import contextlib
import math
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ZeroNormError(ValueError):
    """A row with zero Euclidean norm was normalized."""


class GraphError(RuntimeError):
    """The differentiation graph was used incorrectly."""


_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, 'dtype', np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64-bit precision inside this block (verification only)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside this block."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    """One recorded operation: its parents and the closure mapping dOut to dParents."""

    __slots__ = ('op', 'parents', 'backward_fn')

    def __init__(self, op: str, parents: Tuple['Tensor', ...],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """
    A dense array participating in a differentiation graph.

    Args:
        data: Array-like values; cast to the current default dtype
        requires_grad: Whether gradients accumulate into `grad`
        name: Optional label used in error messages and checkpoints
    """

    __slots__ = ('_data', 'requires_grad', 'grad', 'name', '_node', '_consumed')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=get_default_dtype())
        self._init(array, requires_grad, name)

    def _init(self, array: np.ndarray, requires_grad: bool, name: Optional[str]):
        if any(dim == 0 for dim in array.shape):
            raise ShapeError(f"zero-length dimension in shape {array.shape}")
        array.flags.writeable = False
        self._data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._consumed = False

    @classmethod
    def _wrap(cls, array: np.ndarray, node: Optional[Node] = None) -> 'Tensor':
        out = cls.__new__(cls)
        out._init(np.asarray(array), node is not None, None)
        out._node = node
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value: np.ndarray):
        value = np.array(value, dtype=value.dtype if isinstance(value, np.ndarray) else get_default_dtype())
        if value.shape != self._data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to tensor of shape {self._data.shape}")
        value.flags.writeable = False
        self._data = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, float, int, np.ndarray]


def _as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor._wrap(out, Node(op, tuple(parents), backward_fn))
    return Tensor._wrap(out)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcasting added to reach it from `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# Graph traversal

class Graph:
    """Topologically ordered record of the operations reachable from an output."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> 'Graph':
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in tensor._node.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def release(self):
        for tensor in self.nodes:
            if tensor._node is not None:
                tensor._node.backward_fn = None


def backward(loss: Tensor):
    """
    Accumulate d(loss)/d(t) into `t.grad` for every reachable leaf with requires_grad.

    Raises:
        ShapeError: loss is not a scalar
        GraphError: the graph was already consumed by an earlier backward
    """
    if loss._data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice without a new forward pass")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss._data) if loss.grad is None else loss.grad + 1.0
        loss._consumed = True
        return

    graph = Graph.from_output(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss._data)}
    for tensor in reversed(graph.nodes):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        node = tensor._node
        if node is None:
            if tensor.requires_grad:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        if node.backward_fn is None:
            raise GraphError("backward called twice without a new forward pass")
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    graph.release()
    loss._consumed = True


# Elementwise and structural operations

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b with checked broadcasting."""
    _check_broadcast('add', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record('add', a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b with checked broadcasting."""
    _check_broadcast('sub', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record('sub', a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b with checked broadcasting."""
    _check_broadcast('mul', a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record('mul', a.data * b.data, (a, b), grad_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant that takes no gradient."""
    factor = float(factor)
    return _record('scale', x.data * factor, (x,), lambda g: (g * factor,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record('exp', out, (x,), lambda g: (g * out,))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dimensions, got {x.shape}")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record('transpose', np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {original} into {tuple(shape)}") from None
    return _record('reshape', out, (x,), lambda g: (g.reshape(original),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, broadcasting leading axes.

    Backward: dA = dC·Bᵀ, dB = Aᵀ·dC (reduced over broadcast axes).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from None

    def grad_fn(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _record('matmul', out, (a, b), grad_fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the array-library name
    shape = x.shape
    return _record('sum', np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean over all elements, or over one axis."""
    shape = x.shape
    if axis is None:
        count = x.data.size

        def grad_fn(g):
            return (np.full(shape, g / count, dtype=x.dtype),)

        return _record('mean', np.asarray(x.data.mean()), (x,), grad_fn)

    count = shape[axis]

    def axis_grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _record('mean', x.data.mean(axis=axis), (x,), axis_grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _record('gelu', out, (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record('softmax', out, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record('layer_norm', out, (x, gamma, beta), grad_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup `weight[ids]`; ids is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.max()) if ids.max() >= vocab else int(ids.min())
        raise IndexError(f"token id {bad} outside vocabulary of size {vocab}")

    def grad_fn(g):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids, g)
        return (dw,)

    return _record('embedding', weight.data[ids], (weight,), grad_fn)


def gather_positions(x: Tensor, positions) -> Tensor:
    """Pick `x[i, positions[i]]` from a [n, L, d] tensor, giving [n, d]."""
    positions = np.asarray(positions, dtype=np.int64)
    if x.ndim != 3 or positions.shape != (x.shape[0],):
        raise ShapeError(f"gather_positions: x {x.shape} with positions {positions.shape}")
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dx[rows, positions] = g
        return (dx,)

    return _record('gather_positions', x.data[rows, positions], (x,), grad_fn)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm; zero rows are an error."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ZeroNormError("cannot normalize a row with zero norm")
    out = x.data / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _record('l2_normalize', out, (x,), grad_fn)


# Losses

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    count = diff.size

    def grad_fn(g):
        d = diff * (2.0 * g / count)
        return d, -d

    return _record('mse', np.asarray((diff * diff).mean()), (a, b), grad_fn)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target], stabilized by row-max subtraction."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} with targets {targets.shape}")
    n, c = logits.shape
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"target index outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    nll = np.log(total[:, 0]) - shifted[rows, targets]

    def grad_fn(g):
        probs = e / total
        probs[rows, targets] -= 1.0
        return (probs * (g / n),)

    return _record('softmax_cross_entropy', np.asarray(nll.mean()), (logits,), grad_fn)


# Verification

def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """
    Compare analytic gradients with central finite differences.

    The analytic pass runs in the inputs' own precision. The numeric pass
    re-evaluates `fn` with every input promoted to float64 inside
    `float64_mode`, so the oracle stays sharp for float32 checks too.

    Returns:
        Max over inputs of max|analytic - numeric| / max(max|numeric|, 1e-8)
    """
    for tensor in inputs:
        tensor.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    originals = [t.data for t in inputs]
    worst = 0.0
    try:
        with float64_mode(), no_grad():
            for tensor in inputs:
                tensor.data = tensor.data.astype(np.float64)
            for tensor, grad in zip(inputs, analytic):
                base = tensor.data
                numeric = np.zeros(base.shape, dtype=np.float64)
                for index in np.ndindex(base.shape):
                    bumped = base.copy()
                    bumped[index] += eps
                    tensor.data = bumped
                    upper = fn().item()
                    bumped[index] -= 2 * eps
                    tensor.data = bumped
                    lower = fn().item()
                    numeric[index] = (upper - lower) / (2 * eps)
                tensor.data = base
                denom = max(float(np.abs(numeric).max()), 1e-8)
                worst = max(worst, float(np.abs(grad.astype(np.float64) - numeric).max()) / denom)
    finally:
        for tensor, original in zip(inputs, originals):
            tensor.data = original
    return worst
