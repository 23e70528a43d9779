"""
Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 array and, when produced by an operation on
tensors that require gradients, remembers the ``Function`` that created
it. ``backward(loss, params)`` walks that graph in reverse topological
order and returns one gradient array per requested parameter.

The module follows these principles:
- Every operation is a ``Function`` subclass with a numpy ``forward`` and a
  ``backward`` that maps the output gradient to one gradient per input.
- Broadcasting is supported; gradients are summed back to input shapes.
- ``no_grad()`` disables graph recording for inference.
"""

from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from typing import Any, Optional, Union

import numpy as np
from scipy import special

from .errors import GraphNotEvaluated, ShapeMismatch

ArrayLike = Union["Tensor", np.ndarray, float, int]

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcast to reach ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A recorded operation: keeps its inputs and whatever backward needs."""

    def __init__(self, *parents: "Tensor") -> None:
        self.parents = parents
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> "Tensor":
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        fn.saved.update(kwargs)
        data = fn.forward(*(t.data for t in tensors))
        if _grad_enabled and any(t.requires_grad for t in tensors):
            return Tensor(data, requires_grad=True, creator=fn)
        return Tensor(data)


class Tensor:
    """
    A float64 array that may take part in a differentiable graph.

    Example:
        >>> w = Parameter(np.array([1.0, -2.0]), name="w")
        >>> loss = (w * w).sum() * 0.5
        >>> backward(loss, [w])[0]
        array([ 1., -2.])
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.creator = creator

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return Index.apply(self, index=index)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def swapaxes(self) -> "Tensor":
        """Swap the last two axes."""
        return SwapLast.apply(self)

    @property
    def T(self) -> "Tensor":
        return self.swapaxes()

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    def __init__(self, data: Any, name: str = "") -> None:
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        return (
            _unbroadcast(grad / b.data, a.shape),
            _unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Pow(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return a ** self.saved["exponent"]

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        (a,) = self.parents
        p = self.saved["exponent"]
        return (grad * p * a.data ** (p - 1.0),)


class MatMul(Function):
    """Matrix product over the last two axes, with batch broadcasting."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeMismatch(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch(f"matmul inner sizes differ: {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


class Sum(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.sum(a, axis=self.saved["axis"], keepdims=self.saved["keepdims"])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        (a,) = self.parents
        axis = self.saved["axis"]
        if axis is not None and not self.saved["keepdims"]:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Reshape(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return a.reshape(self.saved["shape"])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.parents[0].shape),)


class SwapLast(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.swapaxes(a, -1, -2)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (np.swapaxes(grad, -1, -2),)


class Index(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.array(a[self.saved["index"]])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        out = np.zeros_like(self.parents[0].data)
        np.add.at(out, self.saved["index"], grad)
        return (out,)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["out"] = np.exp(a)
        return self.saved["out"]

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * self.saved["out"],)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.log(a)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad / self.parents[0].data,)


class Tanh(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["out"] = np.tanh(a)
        return self.saved["out"]

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        out = self.saved["out"]
        return (grad * (1.0 - out * out),)


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["out"] = special.expit(a)
        return self.saved["out"]

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        out = self.saved["out"]
        return (grad * out * (1.0 - out),)


class Relu(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.maximum(a, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (grad * (self.parents[0].data > 0.0),)


class Maximum(Function):
    """Elementwise max; ties send the gradient to the first operand."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.maximum(a, b)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        first = a.data >= b.data
        return (
            _unbroadcast(grad * first, a.shape),
            _unbroadcast(grad * ~first, b.shape),
        )


class Minimum(Function):
    """Elementwise min; ties send the gradient to the first operand."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.minimum(a, b)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        first = a.data <= b.data
        return (
            _unbroadcast(grad * first, a.shape),
            _unbroadcast(grad * ~first, b.shape),
        )


class Clip(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.saved["low"], self.saved["high"])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a = self.parents[0].data
        inside = (a >= self.saved["low"]) & (a <= self.saved["high"])
        return (grad * inside,)


class LogSoftmax(Function):
    """Log-softmax over the last axis with max subtraction."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        shifted = a - np.max(a, axis=-1, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        probs = np.exp(self.saved["out"])
        return (grad - probs * np.sum(grad, axis=-1, keepdims=True),)


class Softmax(Function):
    """Softmax over the last axis with max subtraction."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        shifted = np.exp(a - np.max(a, axis=-1, keepdims=True))
        out = shifted / np.sum(shifted, axis=-1, keepdims=True)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        out = self.saved["out"]
        return (out * (grad - np.sum(grad * out, axis=-1, keepdims=True)),)


class LogNdtr(Function):
    """Log of the standard normal CDF."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["out"] = special.log_ndtr(a)
        return self.saved["out"]

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a = self.parents[0].data
        log_pdf = -0.5 * a * a - 0.5 * np.log(2.0 * np.pi)
        return (grad * np.exp(log_pdf - self.saved["out"]),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        return np.concatenate(arrays, axis=self.saved["axis"])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        axis = self.saved["axis"]
        bounds = np.cumsum([t.shape[axis] for t in self.parents])[:-1]
        return tuple(np.split(grad, bounds, axis=axis))


class Stack(Function):
    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        return np.stack(arrays, axis=self.saved["axis"])

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        axis = self.saved["axis"]
        return tuple(np.take(grad, i, axis=axis) for i in range(len(self.parents)))


class Where(Function):
    """Select ``a`` where the fixed boolean mask holds, else ``b``."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.where(self.saved["condition"], a, b)

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        a, b = self.parents
        condition = self.saved["condition"]
        return (
            _unbroadcast(np.where(condition, grad, 0.0), a.shape),
            _unbroadcast(np.where(condition, 0.0, grad), b.shape),
        )


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Maximum.apply(a, b)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Minimum.apply(a, b)


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    return Clip.apply(a, low=low, high=high)


def softmax(a: ArrayLike) -> Tensor:
    return Softmax.apply(a)


def log_softmax(a: ArrayLike) -> Tensor:
    return LogSoftmax.apply(a)


def log_ndtr(a: ArrayLike) -> Tensor:
    return LogNdtr.apply(a)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    return Where.apply(a, b, condition=np.asarray(condition, dtype=bool))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        if node.creator is not None:
            for parent in node.creator.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack_.append((parent, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """
    Reverse-mode gradients of a scalar loss.

    Args:
        loss: Scalar tensor produced by a forward pass.
        params: Tensors to differentiate with respect to.

    Returns:
        list[np.ndarray]: One gradient per parameter, zeros for parameters
        the loss does not depend on.

    Raises:
        GraphNotEvaluated: If ``loss`` is not a scalar tensor.
    """
    if not isinstance(loss, Tensor):
        raise GraphNotEvaluated(f"loss must be a Tensor from a forward pass, got {type(loss)!r}")
    if loss.data.size != 1:
        raise GraphNotEvaluated(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topological_order(loss)):
            grad = grads.get(id(node))
            if grad is None or node.creator is None:
                continue
            for parent, parent_grad in zip(
                node.creator.parents, node.creator.backward(grad), strict=True
            ):
                if not parent.requires_grad or parent_grad is None:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    return [
        np.array(grads[id(p)], dtype=np.float64).reshape(p.shape)
        if id(p) in grads and p is not loss
        else np.zeros_like(p.data)
        for p in params
    ]
