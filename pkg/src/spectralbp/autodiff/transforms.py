"""Reverse mode, forward mode, gradients and compiled replay."""
from __future__ import annotations

from functools import partial
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .core import PRIMITIVES, Node, NotReachableError, ShapeError, ancestors, as_node, constant


def _dependents(nodes: list[Node], seeds: set[int]) -> set[int]:
    dep = set(seeds)
    for n in nodes:
        if n.id not in dep and any(p.id in dep for p in n.parents):
            dep.add(n.id)
    return dep


def vjp(output: Node, wrt: Sequence[Node], cotangent=None) -> list[Node]:
    """Graph of u^T J for the map wrt -> output.

    The returned nodes are ordinary graph nodes, so they can be differentiated
    again. Inputs that do not influence `output` get a zero constant; if none
    of them does, `NotReachableError` is raised.
    """
    wrt = list(wrt)
    if cotangent is None:
        if output.value.ndim != 0:
            raise ShapeError("a cotangent is required for non-scalar outputs")
        cotangent = np.ones(())
    cot = as_node(cotangent)
    if cot.value.shape != output.value.shape:
        raise ShapeError(f"cotangent shape {cot.value.shape} != output shape {output.value.shape}")
    nodes = ancestors([output])
    wrt_ids = {n.id for n in wrt}
    dep = _dependents(nodes, wrt_ids)
    if output.id not in dep:
        raise NotReachableError("output does not depend on any of the requested inputs")

    cots: dict[int, Node] = {output.id: cot}
    found: dict[int, Node] = {}
    for n in reversed(nodes):
        g = cots.pop(n.id, None)
        if g is None:
            continue
        if n.id in wrt_ids:
            found[n.id] = g
        if n.is_leaf:
            continue
        rule = PRIMITIVES[n.op].vjp
        if rule is None:
            continue
        needs = tuple(p.id in dep for p in n.parents)
        if not any(needs):
            continue
        for p, gp in zip(n.parents, rule(n, g, needs)):
            if gp is None or p.id not in dep:
                continue
            prev = cots.get(p.id)
            cots[p.id] = gp if prev is None else ops.add(prev, gp)
    return [found[n.id] if n.id in found else ops.zeros_like(n) for n in wrt]


def jvp(output: Node, inputs: Sequence[Node], tangents: Sequence) -> Node:
    """Graph of J v: the directional derivative of output along `tangents`."""
    inputs = list(inputs)
    tangents = [as_node(t) for t in tangents]
    if len(inputs) != len(tangents):
        raise ValueError("need one tangent per input")
    tans: dict[int, Node] = {}
    for x, t in zip(inputs, tangents):
        if t.value.shape != x.value.shape:
            raise ShapeError(f"tangent shape {t.value.shape} != input shape {x.value.shape}")
        tans[x.id] = t
    for n in ancestors([output]):
        if n.id in tans or n.is_leaf:
            continue
        pts = tuple(tans.get(p.id) for p in n.parents)
        if all(t is None for t in pts):
            continue
        rule = PRIMITIVES[n.op].jvp
        if rule is None:
            continue
        t = rule(n, pts)
        if t is not None:
            tans[n.id] = t
    if output.id not in tans:
        raise NotReachableError("output does not depend on the given inputs")
    return tans[output.id]


def grad_nodes(scalar: Node, wrt: Sequence[Node]) -> list[Node]:
    if scalar.value.ndim != 0:
        raise ShapeError("grad needs a scalar output")
    return vjp(scalar, wrt)


def grad(scalar: Node, wrt) -> np.ndarray:
    """Flattened gradient of a scalar graph.

    `wrt` is a sequence of nodes or a mapping name -> node (e.g. the bound
    parameters of a `ParameterStore`); the result follows its order.
    """
    nodes = list(wrt.values()) if isinstance(wrt, Mapping) else list(wrt)
    gs = grad_nodes(scalar, nodes)
    return np.concatenate([np.ravel(g.value) for g in gs]) if gs else np.zeros(0)


class Program:
    """A recorded graph that can be re-run with new leaf values.

    Only the listed `inputs` are rebindable; every other leaf keeps the value it
    had when the graph was built. Shapes are fixed at build time.
    """

    def __init__(self, outputs: Sequence[Node], inputs: Sequence[Node]):
        nodes = ancestors(outputs)
        slot = {n.id: i for i, n in enumerate(nodes)}
        self._init = [n.value for n in nodes]
        self._shapes = [n.value.shape for n in inputs]
        for n in inputs:
            if not n.is_leaf:
                raise ValueError(f"{n!r} is not a leaf and cannot be rebound")
        # Inputs the outputs don't depend on are accepted and ignored.
        self._inputs = [slot.get(n.id, -1) for n in inputs]
        # Nodes that don't depend on any input keep their recorded values.
        live = _dependents(nodes, {n.id for n in inputs})
        steps = []
        for n in nodes:
            if n.is_leaf or n.id not in live:
                continue
            impl = PRIMITIVES[n.op].impl
            fn = partial(impl, **n.attrs) if n.attrs else impl
            steps.append((slot[n.id], fn, tuple(slot[p.id] for p in n.parents)))
        self._steps = steps
        self._outputs = [slot[o.id] for o in outputs]

    def __len__(self):
        return len(self._steps)

    def __call__(self, *values) -> list[np.ndarray]:
        if len(values) != len(self._inputs):
            raise ValueError(f"expected {len(self._inputs)} input values, got {len(values)}")
        vals = list(self._init)
        for s, shape, v in zip(self._inputs, self._shapes, values):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != shape:
                raise ShapeError(f"bound value shape {v.shape} != {shape}")
            if s >= 0:
                vals[s] = v
        for s, fn, args in self._steps:
            if len(args) == 1:
                vals[s] = fn(vals[args[0]])
            elif len(args) == 2:
                vals[s] = fn(vals[args[0]], vals[args[1]])
            else:
                vals[s] = fn(*[vals[i] for i in args])
        return [vals[i] for i in self._outputs]


def evaluate(node: Node, bindings: Mapping[Node, object] | None = None) -> np.ndarray:
    """Value of `node`, optionally recomputed with some leaves rebound."""
    if not bindings:
        return node.value
    keys = list(bindings)
    return Program([node], keys)(*[bindings[k] for k in keys])[0]


__all__ = ["vjp", "jvp", "grad", "grad_nodes", "Program", "evaluate", "constant"]
