"""Dense tensors backed by numpy with a reverse-mode autodiff tape.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import DimensionError, NumericError, UsageError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = {"dtype": np.float32, "grad_enabled": True}


def get_default_dtype() -> type:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    _state["dtype"] = _resolve_dtype(dtype)


def _resolve_dtype(dtype) -> type:
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise UsageError(f"unsupported dtype {dtype!r}")
        return _DTYPES[dtype]
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype!r}")
    return dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters.

    >>> with precision("float64"):
    ...     t = Tensor([1.0, 2.0])
    >>> t.dtype
    dtype('float64')
    """
    prev = _state["dtype"]
    _state["dtype"] = _resolve_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional array that can take part in gradient computation.

    ``data`` is always a float32 or float64 numpy array. Leaf tensors with
    ``requires_grad=True`` accumulate into ``grad`` when :meth:`backward` is
    called on a scalar that depends on them.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dt = _resolve_dtype(dtype) if dtype is not None else get_default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dt))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Wrap the result of an operation and record it on the tape.

        ``backward`` receives the output gradient and must return one entry
        per parent (``None`` where no gradient is needed).
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---------------------------------------------------------------- backward
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``grad`` on every leaf that this tensor depends on.

        Gradients accumulate across calls; reset them with ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient {grad.shape} does not match {self.shape}")
        if not self.requires_grad:
            return

        grads = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ------------------------------------------------------------- arithmetic
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=self.dtype)

    def __add__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data + other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data - other.data,
            (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        return Tensor.from_op(
            a * b,
            (self, other),
            lambda g: (
                unbroadcast(g * b, a.shape) if self.requires_grad else None,
                unbroadcast(g * a, b.shape) if other.requires_grad else None,
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor.from_op(
            out,
            (self, other),
            lambda g: (
                unbroadcast(g / b, a.shape) if self.requires_grad else None,
                unbroadcast(-g * out / b, b.shape) if other.requires_grad else None,
            ),
        )

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise UsageError("only scalar exponents are supported")
        p = float(exponent)
        a = self.data
        return Tensor.from_op(
            a**p, (self,), lambda g: (g * p * a ** (p - 1.0),)
        )

    def __matmul__(self, other):
        other = self._lift(other)
        if self.ndim != 2 or other.ndim != 2:
            raise DimensionError("matmul expects two rank-2 tensors")
        a, b = self.data, other.data
        return Tensor.from_op(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims), dtype=self.dtype)

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(out, (self,), _bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------- reshaping
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor.from_op(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        )

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def _bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(np.ascontiguousarray(self.data[index]), (self,), _bw)

    # ----------------------------------------------------------- elementwise
    def square(self) -> "Tensor":
        a = self.data
        return Tensor.from_op(a * a, (self,), lambda g: (2.0 * g * a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * 0.5 / out,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor.from_op(np.log(a), (self,), lambda g: (g / a,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor.from_op(self.data * mask, (self,), lambda g: (g * mask,))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological_order(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Functional alias for ``loss.backward()``."""
    loss.backward()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
