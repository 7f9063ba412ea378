"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive in :mod:`memaudit.numerics.ops` returns a :class:`Tensor`
that remembers its parents and a closure propagating the output gradient
back to them. :func:`backward` linearizes that graph into a tape (reverse
topological order) and replays it.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient contains NaN or Inf."""


class Tensor:
    """An array node in the computation graph.

    Parameters
    ----------
    data : array_like
        Values. Stored as a numpy array; the dtype is preserved for floating
        inputs and promoted to float64 otherwise.
    requires_grad : bool
        Leaf flag. Non-leaf tensors inherit it from their parents.
    name : str, optional
        Label used in diagnostics.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar; the real work lives in ops
    def __add__(self, other):
        from .ops import add
        return add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, as_tensor(other, like=self))

    def __rsub__(self, other):
        from .ops import sub
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, as_tensor(other, like=self))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import mul
        return mul(self, as_tensor(-1.0, like=self))


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data: np.ndarray, parents: Iterable[Tensor],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Create the output of a primitive and hook it into the graph."""
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def tape(loss: Tensor) -> list[Tensor]:
    """Return the nodes reachable from ``loss`` in reverse topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    order.reverse()
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None,
             check_finite: bool = True) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every leaf that requires it.
    When ``params`` is given, a dict of gradients keyed like ``params`` is
    returned; parameters the loss does not depend on get exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if check_finite and not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"loss is not finite: {loss.data.reshape(-1)[0]}")

    if params is not None:
        for p in params.values():
            p.grad = None

    if loss.requires_grad:
        nodes = tape(loss)
        for node in nodes:
            if node._parents:
                node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free intermediate buffers; leaves keep theirs
                node.grad = None if node is not loss else node.grad

    if params is None:
        return {}
    grads = {}
    for key, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if check_finite and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {key!r}")
        grads[key] = g
    return grads
