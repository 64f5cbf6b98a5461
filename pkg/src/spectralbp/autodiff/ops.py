"""Primitive operations and their derivative rules.

Shapes are never broadcast implicitly. Operands of elementwise primitives
must have identical shapes; replication is spelled out with `expand_axis`,
`expand_trailing` or `fill`, whose adjoints are the matching reductions.

Tensors put the "feature" axis first: a batch of B points in R^n is an
(n, B) array, and `matmul(W, X)` contracts W's columns with X's first axis.

Every rule below builds its result from primitives in this module, so the
derivative graphs can themselves be differentiated.
"""
from __future__ import annotations

import numpy as np

from .core import Node, ShapeError, apply, constant, register

LEAKY_SLOPE = 0.01


def _same_shape(name, a: Node, b: Node):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{name}: shape mismatch {a.value.shape} vs {b.value.shape}")


def _acc(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def zeros_like(x: Node) -> Node:
    return constant(np.zeros(x.value.shape))


# --- elementwise arithmetic ---------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return apply("add", a, b)


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return apply("sub", a, b)


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return apply("mul", a, b)


def scale(a: Node, c: float) -> Node:
    return apply("scale", a, c=float(c))


def shift(a: Node, c: float) -> Node:
    return apply("shift", a, c=float(c))


def div(a: Node, b: Node) -> Node:
    return mul(a, reciprocal(b))


def square(a: Node) -> Node:
    return mul(a, a)


register(
    "add", np.add,
    vjp=lambda n, g, needs: (g if needs[0] else None, g if needs[1] else None),
    jvp=lambda n, t: _acc(t[0], t[1]),
)


def _sub_jvp(n, t):
    ta, tb = t
    if tb is None:
        return ta
    return scale(tb, -1.0) if ta is None else sub(ta, tb)


register(
    "sub", np.subtract,
    vjp=lambda n, g, needs: (g if needs[0] else None, scale(g, -1.0) if needs[1] else None),
    jvp=_sub_jvp,
)


def _mul_vjp(n, g, needs):
    a, b = n.parents
    return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)


def _mul_jvp(n, t):
    a, b = n.parents
    ta, tb = t
    return _acc(None if ta is None else mul(ta, b), None if tb is None else mul(a, tb))


register("mul", np.multiply, vjp=_mul_vjp, jvp=_mul_jvp)

register(
    "scale", lambda x, c: x * c,
    vjp=lambda n, g, needs: (scale(g, n.attrs["c"]),),
    jvp=lambda n, t: scale(t[0], n.attrs["c"]),
)
register(
    "shift", lambda x, c: x + c,
    vjp=lambda n, g, needs: (g,),
    jvp=lambda n, t: t[0],
)


# --- linear algebra -----------------------------------------------------------

def matmul(w: Node, x: Node) -> Node:
    """W (h, n) applied along the first axis of X (n, ...) -> (h, ...)."""
    if w.value.ndim != 2 or x.value.ndim < 1 or w.value.shape[1] != x.value.shape[0]:
        raise ShapeError(f"matmul: cannot apply {w.value.shape} to {x.value.shape}")
    return apply("matmul", w, x)


def contract(g: Node, x: Node) -> Node:
    """Sum over all trailing axes of g[i, ...] * x[j, ...] -> (i, j)."""
    if g.value.shape[1:] != x.value.shape[1:]:
        raise ShapeError(f"contract: trailing shapes differ {g.value.shape} vs {x.value.shape}")
    return apply("contract", g, x)


def transpose(w: Node) -> Node:
    if w.value.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return apply("transpose", w)


def _contract_impl(g, x):
    return g.reshape(g.shape[0], -1) @ x.reshape(x.shape[0], -1).T


def _matmul_impl(w, x):
    return (w @ x.reshape(x.shape[0], -1)).reshape((w.shape[0],) + x.shape[1:])


def _matmul_vjp(n, g, needs):
    w, x = n.parents
    return (contract(g, x) if needs[0] else None,
            matmul(transpose(w), g) if needs[1] else None)


def _matmul_jvp(n, t):
    w, x = n.parents
    tw, tx = t
    return _acc(None if tw is None else matmul(tw, x), None if tx is None else matmul(w, tx))


def _contract_vjp(n, c, needs):
    g, x = n.parents
    return (matmul(c, x) if needs[0] else None,
            matmul(transpose(c), g) if needs[1] else None)


def _contract_jvp(n, t):
    g, x = n.parents
    tg, tx = t
    return _acc(None if tg is None else contract(tg, x), None if tx is None else contract(g, tx))


register("matmul", _matmul_impl, vjp=_matmul_vjp, jvp=_matmul_jvp)
register("contract", _contract_impl, vjp=_contract_vjp, jvp=_contract_jvp)
register(
    "transpose", np.transpose,
    vjp=lambda n, g, needs: (transpose(g),),
    jvp=lambda n, t: transpose(t[0]),
)


def inner(a: Node, b: Node) -> Node:
    """Inner product over the first axis: (n, ...) x (n, ...) -> (...)."""
    _same_shape("inner", a, b)
    return apply("inner", a, b)


def _inner_vjp(n, g, needs):
    a, b = n.parents
    size = a.value.shape[0]
    ge = expand_axis(g, 0, size)
    return (mul(ge, b) if needs[0] else None, mul(ge, a) if needs[1] else None)


def _inner_jvp(n, t):
    a, b = n.parents
    ta, tb = t
    return _acc(None if ta is None else inner(ta, b), None if tb is None else inner(a, tb))


register("inner", lambda a, b: np.einsum("i...,i...->...", a, b), vjp=_inner_vjp, jvp=_inner_jvp)


# --- bias / reductions / replication ------------------------------------------

def bias_add(x: Node, b: Node) -> Node:
    if b.value.ndim != 1 or x.value.shape[:1] != b.value.shape:
        raise ShapeError(f"bias_add: bias {b.value.shape} does not match {x.value.shape}")
    return apply("bias_add", x, b)


def sum_trailing(x: Node) -> Node:
    return apply("sum_trailing", x)


def expand_trailing(b: Node, shape: tuple) -> Node:
    if b.value.ndim != 1 or tuple(shape[:1]) != b.value.shape:
        raise ShapeError("expand_trailing: leading size must match")
    return apply("expand_trailing", b, shape=tuple(shape))


def _bias_impl(x, b):
    return x + b.reshape(b.shape + (1,) * (x.ndim - 1))


def _bias_jvp(n, t):
    tx, tb = t
    if tb is None:
        return tx
    if tx is None:
        return expand_trailing(tb, n.value.shape)
    return bias_add(tx, tb)


register(
    "bias_add", _bias_impl,
    vjp=lambda n, g, needs: (g if needs[0] else None, sum_trailing(g) if needs[1] else None),
    jvp=_bias_jvp,
)
register(
    "sum_trailing", lambda x: x.reshape(x.shape[0], -1).sum(axis=1),
    vjp=lambda n, g, needs: (expand_trailing(g, n.parents[0].value.shape),),
    jvp=lambda n, t: sum_trailing(t[0]),
)
register(
    "expand_trailing",
    lambda b, shape: np.broadcast_to(b.reshape(b.shape + (1,) * (len(shape) - 1)), shape),
    vjp=lambda n, g, needs: (sum_trailing(g),),
    jvp=lambda n, t: expand_trailing(t[0], n.attrs["shape"]),
)


def sum(x: Node) -> Node:  # noqa: A001 - mirrors the primitive tag
    return apply("sum", x)


def fill(s: Node, shape: tuple) -> Node:
    if s.value.ndim != 0:
        raise ShapeError("fill expects a scalar")
    return apply("fill", s, shape=tuple(shape))


def mean(x: Node) -> Node:
    return scale(sum(x), 1.0 / x.value.size)


register(
    "sum", lambda x: np.asarray(np.sum(x)),
    vjp=lambda n, g, needs: (fill(g, n.parents[0].value.shape),),
    jvp=lambda n, t: sum(t[0]),
)
register(
    "fill", lambda s, shape: np.broadcast_to(s, shape),
    vjp=lambda n, g, needs: (sum(g),),
    jvp=lambda n, t: fill(t[0], n.attrs["shape"]),
)


def sum_axis(x: Node, axis: int) -> Node:
    nd = x.value.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"sum_axis: axis {axis} out of range for {x.value.shape}")
    return apply("sum_axis", x, axis=axis % nd)


def expand_axis(x: Node, axis: int, size: int) -> Node:
    """Insert a new axis at `axis` and replicate `size` times along it."""
    nd = x.value.ndim + 1
    if not -nd <= axis < nd:
        raise ShapeError(f"expand_axis: axis {axis} out of range")
    axis %= nd
    shape = x.value.shape[:axis] + (int(size),) + x.value.shape[axis:]
    return apply("expand_axis", x, axis=axis, shape=shape)


register(
    "sum_axis", lambda x, axis: x.sum(axis=axis),
    vjp=lambda n, g, needs: (expand_axis(g, n.attrs["axis"], n.parents[0].value.shape[n.attrs["axis"]]),),
    jvp=lambda n, t: sum_axis(t[0], n.attrs["axis"]),
)
register(
    "expand_axis", lambda x, axis, shape: np.repeat(x.reshape(shape[:axis] + (1,) + shape[axis + 1:]),
                                                    shape[axis], axis=axis),
    vjp=lambda n, g, needs: (sum_axis(g, n.attrs["axis"]),),
    jvp=lambda n, t: apply("expand_axis", t[0], **n.attrs),
)


def take(x: Node, index: int, axis: int = 0) -> Node:
    nd = x.value.ndim
    axis %= nd
    if not 0 <= index < x.value.shape[axis]:
        raise ShapeError("take: index out of range")
    return apply("take", x, index=int(index), axis=axis)


def _place_impl(x, index, axis, size):
    shape = x.shape[:axis] + (size,) + x.shape[axis:]
    out = np.zeros(shape)
    idx = (slice(None),) * axis + (index,)
    out[idx] = x
    return out


def place(x: Node, index: int, axis: int, size: int) -> Node:
    """Embed x as slice `index` of a zero tensor with a new axis of `size`."""
    return apply("place", x, index=int(index), axis=int(axis), size=int(size))


register(
    "take", lambda x, index, axis: np.take(x, index, axis=axis),
    vjp=lambda n, g, needs: (place(g, n.attrs["index"], n.attrs["axis"],
                                   n.parents[0].value.shape[n.attrs["axis"]]),),
    jvp=lambda n, t: apply("take", t[0], **n.attrs),
)
register(
    "place", _place_impl,
    vjp=lambda n, g, needs: (take(g, n.attrs["index"], n.attrs["axis"]),),
    jvp=lambda n, t: apply("place", t[0], **n.attrs),
)


def stack(xs, axis: int = 0) -> Node:
    xs = list(xs)
    shape = xs[0].value.shape
    for x in xs[1:]:
        if x.value.shape != shape:
            raise ShapeError("stack: all operands need the same shape")
    axis %= len(shape) + 1
    return apply("stack", *xs, axis=axis)


def _stack_jvp(n, t):
    if all(x is None for x in t):
        return None
    parts = [zeros_like(p) if x is None else x for p, x in zip(n.parents, t)]
    return stack(parts, n.attrs["axis"])


register(
    "stack", lambda *xs, axis: np.stack(xs, axis=axis),
    vjp=lambda n, g, needs: tuple(take(g, k, n.attrs["axis"]) if need else None
                                  for k, need in enumerate(needs)),
    jvp=_stack_jvp,
)


# --- nonlinearities -----------------------------------------------------------

def leaky_relu(x: Node, slope: float = LEAKY_SLOPE) -> Node:
    return apply("leaky_relu", x, slope=float(slope))


def leaky_relu_grad(x: Node, slope: float = LEAKY_SLOPE) -> Node:
    """Derivative mask of leaky_relu; 1 for x >= 0 (the value at 0 is 1)."""
    return apply("leaky_relu_grad", x, slope=float(slope))


register(
    "leaky_relu", lambda x, slope: np.where(x >= 0.0, x, slope * x),
    vjp=lambda n, g, needs: (mul(g, leaky_relu_grad(n.parents[0], n.attrs["slope"])),),
    jvp=lambda n, t: mul(t[0], leaky_relu_grad(n.parents[0], n.attrs["slope"])),
)
# Piecewise constant, so its derivative is zero almost everywhere: no rules.
register("leaky_relu_grad", lambda x, slope: np.where(x >= 0.0, 1.0, slope))


def stop_gradient(x: Node) -> Node:
    return apply("stop_gradient", x)


register("stop_gradient", lambda x: x)


def log(x: Node) -> Node:
    return apply("log", x)


def exp(x: Node) -> Node:
    return apply("exp", x)


def reciprocal(x: Node) -> Node:
    return apply("reciprocal", x)


def sqrt(x: Node) -> Node:
    return apply("sqrt", x)


def sin(x: Node) -> Node:
    return apply("sin", x)


def cos(x: Node) -> Node:
    return apply("cos", x)


def logaddexp(a: Node, b: Node) -> Node:
    _same_shape("logaddexp", a, b)
    return apply("logaddexp", a, b)


def sigmoid(x: Node) -> Node:
    return reciprocal(shift(exp(scale(x, -1.0)), 1.0))


def _unary(fn_deriv):
    # d/dx f(x) expressed as a node, given the output node n and its input x.
    def vjp(n, g, needs):
        return (mul(g, fn_deriv(n, n.parents[0])),)

    def jvp(n, t):
        return mul(t[0], fn_deriv(n, n.parents[0]))

    return vjp, jvp


register("log", np.log, *_unary(lambda n, x: reciprocal(x)))
register("exp", np.exp, *_unary(lambda n, x: n))
register("reciprocal", np.reciprocal, *_unary(lambda n, x: scale(mul(n, n), -1.0)))
register("sqrt", np.sqrt, *_unary(lambda n, x: scale(reciprocal(n), 0.5)))
register("sin", np.sin, *_unary(lambda n, x: cos(x)))
register("cos", np.cos, *_unary(lambda n, x: scale(sin(x), -1.0)))


def _lae_vjp(n, g, needs):
    a, b = n.parents
    return (mul(g, exp(sub(a, n))) if needs[0] else None,
            mul(g, exp(sub(b, n))) if needs[1] else None)


def _lae_jvp(n, t):
    a, b = n.parents
    ta, tb = t
    return _acc(None if ta is None else mul(ta, exp(sub(a, n))),
                None if tb is None else mul(tb, exp(sub(b, n))))


register("logaddexp", np.logaddexp, vjp=_lae_vjp, jvp=_lae_jvp)


# --- small dense operators applied per batch point ------------------------------

def batch_matvec(e: Node, v: Node, transpose: bool = False) -> Node:
    """out[i, ..., k] = sum_l E[i, l, ...] V[l, ..., k] (E[l, i, ...] if transpose).

    E is (n, n, *batch) and V is (n, *batch, k): one small matrix per batch
    point applied to k vectors at once.
    """
    ev, vv = e.value.shape, v.value.shape
    if len(ev) < 2 or ev[0] != ev[1] or ev[1] != vv[0] or ev[2:] != vv[1:-1]:
        raise ShapeError(f"batch_matvec: incompatible shapes {ev} and {vv}")
    return apply("batch_matvec", e, v, transpose=bool(transpose))


def outer_sum(g: Node, v: Node) -> Node:
    """O[i, l, ...] = sum_k G[i, ..., k] V[l, ..., k]; the adjoint of batch_matvec in E."""
    _same_shape("outer_sum", g, v)
    return apply("outer_sum", g, v)


def _bmv_impl(e, v, transpose):
    return np.einsum("li...,l...k->i...k" if transpose else "il...,l...k->i...k", e, v)


def _bmv_vjp(n, c, needs):
    e, v = n.parents
    tr = n.attrs["transpose"]
    ge = (outer_sum(v, c) if tr else outer_sum(c, v)) if needs[0] else None
    gv = batch_matvec(e, c, not tr) if needs[1] else None
    return ge, gv


def _bmv_jvp(n, t):
    e, v = n.parents
    tr = n.attrs["transpose"]
    te, tv = t
    return _acc(None if te is None else batch_matvec(te, v, tr),
                None if tv is None else batch_matvec(e, tv, tr))


def _outer_vjp(n, c, needs):
    g, v = n.parents
    return (batch_matvec(c, v, False) if needs[0] else None,
            batch_matvec(c, g, True) if needs[1] else None)


def _outer_jvp(n, t):
    g, v = n.parents
    tg, tv = t
    return _acc(None if tg is None else outer_sum(tg, v), None if tv is None else outer_sum(g, tv))


register("batch_matvec", _bmv_impl, vjp=_bmv_vjp, jvp=_bmv_jvp)
register("outer_sum", lambda g, v: np.einsum("i...k,l...k->il...", g, v), vjp=_outer_vjp, jvp=_outer_jvp)
