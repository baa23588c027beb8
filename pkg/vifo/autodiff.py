"""Reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built define-by-run: every operation on a :class:`Tensor` returns
a new node that remembers its parents and a vector-Jacobian product. Adjoints
live in a dictionary owned by one :func:`grad` call, never on the nodes, so a
graph can be differentiated more than once and independent graphs never share
mutable state.
"""

from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
from scipy.special import expit

type ArrayLike = Any
type VJP = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class NonFiniteError(FloatingPointError):
    """A forward value or an adjoint stopped being finite."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _expand(grad: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction's adjoint back over the reduced axes."""
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape)


class Tensor:
    # numpy defers to the reflected operators below instead of broadcasting
    # a Tensor into an object array.
    __array_ufunc__ = None

    __slots__ = ("data", "parents", "vjp", "op", "name")

    def __init__(
        self,
        data: ArrayLike,
        parents: tuple["Tensor", ...] = (),
        vjp: VJP | None = None,
        op: str = "leaf",
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name

    @classmethod
    def leaf(cls, data: ArrayLike, name: str | None = None) -> "Tensor":
        return cls(np.array(data, dtype=np.float64), name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(op={self.op}{label} shape={self.shape})"

    # ── arithmetic ────────────────────────────────────────────────────

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        return _result(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return _result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return _result(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        return _result(
            a @ b,
            (self, other),
            lambda g: (
                _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape),
                _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape),
            ),
            "matmul",
        )

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) @ self

    # ── elementwise ───────────────────────────────────────────────────

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return _result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return _result(out, (self,), lambda g: (g / x,), "log")

    def square(self) -> "Tensor":
        x = self.data
        return _result(x * x, (self,), lambda g: (2.0 * g * x,), "square")

    def sqrt(self) -> "Tensor":
        with np.errstate(invalid="ignore"):
            out = np.sqrt(self.data)
        return _result(out, (self,), lambda g: (0.5 * g / out,), "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _result(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return _result(out, (self,), lambda g: (g * expit(x),), "softplus")

    def clip_max(self, cap: float) -> "Tensor":
        mask = self.data < cap
        return _result(
            np.minimum(self.data, cap), (self,), lambda g: (g * mask,), "clip_max"
        )

    # ── reductions and shape ──────────────────────────────────────────

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        return _result(
            self.data.sum(axis=axis, keepdims=keepdims),
            (self,),
            lambda g: (_expand(g, shape, axis, keepdims),),
            "sum",
        )

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise ValueError("mean of an empty tensor")
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape: int) -> "Tensor":
        original = self.shape
        return _result(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape"
        )

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        fancy = _is_fancy(index)

        def vjp(g: np.ndarray) -> tuple[np.ndarray]:
            out = np.zeros(shape)
            if fancy:
                np.add.at(out, index, g)
            else:
                out[index] += g
            return (out,)

        return _result(self.data[index], (self,), vjp, "slice")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(item, np.ndarray | list) for item in items)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp: VJP, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return Tensor(data, parents, vjp, op)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, op="const")


def logsumexp(v: ArrayLike, axis: int = -1) -> Tensor:
    """Stable ``log(sum(exp(v)))`` along ``axis``."""
    v = as_tensor(v)
    x = v.data
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError("logsumexp of an empty input")
    peak = np.max(x, axis=axis, keepdims=True)
    shifted = np.exp(x - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    weights = shifted / total

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.expand_dims(g, axis) * weights,)

    return _result(out, (v,), vjp, "logsumexp")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node.parents if id(parent) not in visited)
    return order


def grad(output: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``output`` with respect to each leaf in ``params``.

    Leaves that do not feed ``output`` get zero gradients. A leaf reached by
    several paths receives the sum of their contributions.
    """
    if output.shape != ():
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    for param in params:
        if not param.is_leaf:
            raise ValueError(f"{param!r} is not a leaf of the graph")

    adjoints: dict[int, np.ndarray] = {id(output): np.ones(())}
    for node in reversed(_topological_order(output)):
        g = adjoints.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, parent_grad in zip(node.parents, node.vjp(g), strict=True):
            if parent_grad is None:
                continue
            if not np.all(np.isfinite(parent_grad)):
                raise NonFiniteError(f"non-finite adjoint flowing out of {node.op}")
            key = id(parent)
            adjoints[key] = adjoints[key] + parent_grad if key in adjoints else parent_grad
    return [np.array(adjoints.get(id(p), np.zeros(p.shape)), dtype=np.float64) for p in params]


def numeric_grad(
    fn: Callable[[], float], leaves: Sequence[Tensor], h: float = 1e-5
) -> list[np.ndarray]:
    """Central finite differences of ``fn`` around the current leaf values.

    ``fn`` must be deterministic: stochastic objectives have to reseed their
    noise on every call.
    """
    grads = []
    for leaf in leaves:
        g = np.zeros(leaf.shape)
        for index in np.ndindex(*leaf.shape):
            saved = leaf.data[index]
            leaf.data[index] = saved + h
            upper = fn()
            leaf.data[index] = saved - h
            lower = fn()
            leaf.data[index] = saved
            g[index] = (upper - lower) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    """Norm-wise relative difference between two gradient lists."""
    diff = np.sqrt(sum(float(np.sum((x - y) ** 2)) for x, y in zip(a, b, strict=True)))
    scale = max(
        np.sqrt(sum(float(np.sum(x**2)) for x in a)),
        np.sqrt(sum(float(np.sum(y**2)) for y in b)),
        1e-12,
    )
    return diff / scale
