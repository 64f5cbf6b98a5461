"""Graph nodes and the primitive registry.

Nodes are evaluated eagerly: the value is computed when the node is built.
Every node also records its primitive tag, parents and static attributes, so
the same graph can be differentiated (the derivative rules emit new nodes made
of the same primitives) and replayed with fresh leaf values by `Program`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NotReachableError(ValueError):
    pass


_counter = itertools.count()


class Node:
    __slots__ = ("value", "op", "parents", "attrs", "name", "id")

    def __init__(self, value, op: str, parents: tuple = (), attrs: dict | None = None, name: str | None = None):
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.name = name
        # Ids increase with construction order, which is a topological order.
        self.id = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.shape}>"

    # Operator sugar; all of these dispatch to primitives in ops.py.
    def __add__(self, other):
        from . import ops
        if isinstance(other, Node):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        if isinstance(other, Node):
            return ops.sub(self, other)
        return ops.shift(self, -float(other))

    def __rsub__(self, other):
        from . import ops
        return ops.shift(ops.scale(self, -1.0), float(other))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Node):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


@dataclass(frozen=True)
class Primitive:
    name: str
    impl: Callable
    # vjp(node, cotangent, needs) -> tuple of parent cotangent nodes (None = zero)
    vjp: Callable | None = None
    # jvp(node, parent_tangents) -> tangent node or None
    jvp: Callable | None = None


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, impl: Callable, vjp=None, jvp=None) -> Primitive:
    prim = Primitive(name, impl, vjp, jvp)
    PRIMITIVES[name] = prim
    return prim


def apply(name: str, *parents: Node, **attrs) -> Node:
    prim = PRIMITIVES[name]
    value = prim.impl(*(p.value for p in parents), **attrs)
    return Node(value, name, parents, attrs)


def constant(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), "constant", (), None, name)


def parameter(value, name: str | None = None) -> Node:
    """A differentiable leaf: model parameters, latent points, and so on."""
    return Node(np.array(value, dtype=np.float64), "parameter", (), None, name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def ancestors(outputs) -> list[Node]:
    """All nodes feeding `outputs`, in topological (construction) order."""
    seen: dict[int, Node] = {}
    stack = list(outputs)
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen[n.id] = n
        stack.extend(p for p in n.parents if p.id not in seen)
    return [seen[i] for i in sorted(seen)]
