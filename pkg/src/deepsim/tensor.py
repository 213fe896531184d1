"""Dense tensors with reverse-mode automatic differentiation.

Every tensor produced by a differentiable operation remembers the
:class:`Function` that made it. Node ids come from a global counter, so an
operation's inputs always have smaller ids than its output and a reverse sort
by id is a valid topological order for the backward sweep.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Any, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them for backward."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A recorded operation.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which maps
    the gradient of the output to a tuple with one entry per input (``None``
    for inputs that need no gradient).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        # which inputs required a gradient when the operation ran; later
        # changes to ``requires_grad`` (e.g. unfreezing a network) do not
        # reach back into graphs that were already recorded
        self.needs = tuple(t.requires_grad for t in inputs)

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        track = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=track, _ctx=fn if track else None)


class Tensor:
    """An N-dimensional float array that may take part in a gradient graph."""

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
        _ctx: Function | None = None,
    ):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._ctx = _ctx
        self.id = next(_node_ids)

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def label(self) -> str:
        return self.name if self.name else f"node#{self.id}"

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        grads = backprop(self)
        for node, g in grads.items():
            if node._ctx is None and node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    # -- arithmetic -----------------------------------------------------
    def _operand(self, other):
        # python scalars take this tensor's dtype so float32 graphs stay float32
        if isinstance(other, (int, float)):
            return Tensor(np.asarray(other, dtype=self.dtype))
        return other

    def __add__(self, other):
        return Add.apply(self, self._operand(other))

    def __radd__(self, other):
        return Add.apply(self._operand(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._operand(other))

    def __rsub__(self, other):
        return Sub.apply(self._operand(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._operand(other))

    def __rmul__(self, other):
        return Mul.apply(self._operand(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._operand(other))

    def __rtruediv__(self, other):
        return Div.apply(self._operand(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def square(self) -> Tensor:
        return Square.apply(self)

    def log(self) -> Tensor:
        return Log.apply(self)

    def exp(self) -> Tensor:
        return Exp.apply(self)

    def abs(self) -> Tensor:
        return Abs.apply(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def flatten(self) -> Tensor:
        """Collapse all but the leading (batch) axis."""
        return self.reshape(self.shape[0], -1)

    def clip(self, low: float, high: float) -> Tensor:
        return Clip.apply(self, low=low, high=high)


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def backprop(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns the gradient of ``loss`` for every reachable node that requires a
    gradient, each with the same shape as the node's value.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        if node._ctx is not None:
            stack.extend(t for t, need in zip(node._ctx.inputs, node._ctx.needs) if need)

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            g = np.zeros_like(node.data)
        result[node] = g
        if node._ctx is None:
            continue
        for inp, need, gi in zip(node._ctx.inputs, node._ctx.needs, node._ctx.backward(g)):
            if gi is None or not need:
                continue
            if gi.shape != inp.shape:
                gi = _unbroadcast(gi, inp.shape)
            gi = gi.astype(inp.dtype, copy=False)
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    return result


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt``, without touching ``.grad``.

    Tensors unreachable from the loss get a zero gradient.
    """
    grads = backprop(loss) if loss.requires_grad else {}
    return [grads[t] if t in grads else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise and structural operations


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return g * b.data, g * a.data


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        return g / b.data, -g * a.data / (b.data * b.data)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Square(Function):
    def forward(self, a):
        return a * a

    def backward(self, g):
        return (2.0 * g * self.inputs[0].data,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError(f"log of non-positive value at {self.inputs[0].label}")
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0].data,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, g):
        return (g * np.sign(self.inputs[0].data),)


class Clip(Function):
    def forward(self, a, low, high):
        self.inside = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, g):
        return (g * self.inside,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // max(out.size, 1)
        return out

    def backward(self, g):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.count, shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class GetItem(Function):
    def forward(self, a, index):
        self.index = index
        return np.array(a[index])

    def backward(self, g):
        out = np.zeros_like(self.inputs[0].data)
        np.add.at(out, self.index, g)
        return (out,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        return g @ b.data.T, a.data.T @ g


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)
