"""Dense tensors with a recorded reverse-mode graph.

Every op in :mod:`audiocnn.engine.ops` returns a :class:`Tensor` whose
``_backward`` closure pushes the incoming gradient into its parents.
:func:`backward` walks the graph in reverse topological order and then
drops it, so a second call without a fresh forward pass fails loudly.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate(self, g: np.ndarray) -> None:
        """Add ``g`` into ``self.grad``.

        A first gradient that owns its buffer is adopted without a copy, so
        ops must not hand the same array to two parents.
        """
        if self.grad is None:
            if g.flags.owndata and g.dtype == self.data.dtype:
                self.grad = g.reshape(self.data.shape)
            else:
                self.grad = np.array(g, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self.grad += g.reshape(self.data.shape)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A leaf tensor owned by a layer and updated by the optimizer."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str | None = None, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] = ()) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    ``params`` are zero-filled first so that parameters the loss does not
    depend on end up with an exact zero gradient rather than ``None``.
    """
    if loss._backward is None:
        raise GraphError("no recorded graph")
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    for p in params:
        if p.trainable:
            p.zero_grad()
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # release the graph; intermediate buffers can be large
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None
