"""A small dense tensor with reverse-mode differentiation.

Every ``Tensor`` wraps a float64 ndarray. Operations on tensors that require
gradients record a node holding the parents and a closure computing the
vector-Jacobian product; :func:`backward` walks those nodes in reverse
topological order. Gradients are only produced for tensors with
``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterator, Sequence

import numpy as np

from vismae.errors import ContractError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


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


def _has_integer_array(idx) -> bool:
    # integer fancy indices may repeat, so their gradient must scatter-add
    items = idx if isinstance(idx, tuple) else (idx,)
    for i in items:
        if isinstance(i, list):
            i = np.asarray(i)
        if isinstance(i, np.ndarray) and i.dtype != bool:
            return True
    return False


class Tensor:
    """Row-major float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected method
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return (_unbroadcast(g, a_shape) if self.requires_grad else None,
                    _unbroadcast(g, b_shape) if other.requires_grad else None)

        return _node(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return _node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return (_unbroadcast(g, a_shape) if self.requires_grad else None,
                    _unbroadcast(-g, b_shape) if other.requires_grad else None)

        return _node(self.data - other.data, (self, other), bw)

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return (_unbroadcast(g * b, a.shape) if self.requires_grad else None,
                    _unbroadcast(g * a, b.shape) if other.requires_grad else None)

        return _node(a * b, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return (_unbroadcast(g / b, a.shape) if self.requires_grad else None,
                    _unbroadcast(-g * a / (b * b), b.shape) if other.requires_grad else None)

        return _node(a / b, (self, other), bw)

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        a = self.data
        p = float(exponent)
        return _node(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),))

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ContractError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")

        def bw(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if self.requires_grad else None
            if not other.requires_grad:
                gb = None
            elif b.ndim == 2 and a.ndim > 2:
                # collapse leading axes instead of materializing per-batch products
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return _node(a @ b, (self, other), bw)

    def __rmatmul__(self, other) -> Tensor:
        return as_tensor(other) @ self

    # -- elementwise functions ---------------------------------------------

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self.data
        return _node(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self) -> Tensor:
        pos = self.data > 0
        return _node(np.where(pos, self.data, 0.0), (self,), lambda g: (g * pos,))

    # -- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        count = self.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

        return _node(self.data.mean(axis=axis, keepdims=keepdims), (self,), bw)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __getitem__(self, idx) -> Tensor:
        if isinstance(idx, Tensor):
            idx = idx.data
        shape = self.shape
        advanced = _has_integer_array(idx)

        def bw(g):
            out = np.zeros(shape)
            if advanced:
                np.add.at(out, idx, g)
            else:
                out[idx] = g
            return (out,)

        return _node(self.data[idx], (self,), bw)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
    return out


def make_node(data: np.ndarray, parents: Sequence[Tensor], bw) -> Tensor:
    """Create a graph node for a custom (fused) operation.

    ``bw`` receives the upstream gradient and returns one gradient (or None)
    per parent, each shaped like that parent.
    """
    return _node(np.asarray(data, dtype=np.float64), tuple(parents), bw)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``root``.

    Returns a map from every leaf tensor that requires a gradient to the
    gradient of ``root`` with respect to it. Leaf ``.grad`` attributes are
    accumulated as well.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        warnings.warn("backward called on a tensor that is not attached to a graph", stacklevel=2)
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves
