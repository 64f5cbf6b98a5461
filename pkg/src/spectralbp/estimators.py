"""Matrix-free spectral-sum estimators.

All estimators consume a `LinearOperator` through graph-recorded
applications, so when the operator is built from differentiable nodes the
estimate is itself a differentiable graph.

Operators act on blocks shaped (n, *batch, k): `n` is the operator dimension,
`batch` indexes independent operators sharing one graph (one metric per data
point, say), and `k` indexes probe vectors.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Node, constant, ops
from .linalg import NotSymmetricError, Rng, rademacher


class DegenerateOperatorError(ValueError):
    """The power method found no positive spectrum to rescale with."""


class SpectralBoundWarning(RuntimeWarning):
    pass


POWER_GRAD_MODES = ("full", "rayleigh")
INTERVAL_PAD = 1e-6


@dataclass(frozen=True)
class EstimatorConfig:
    """Parameters (m, p, t, g, eps) of the Chebyshev log-det estimator.

    ``detach_bounds`` treats the spectral bounds as constants when
    differentiating instead of backpropagating through the power method.
    ``power_grad`` selects how lambda_max is differentiated otherwise:
    "full" goes through all t iterations; "rayleigh" differentiates only the
    final Rayleigh quotient with the iterate held fixed (the eigenvalue
    derivative v^T dA v at convergence).
    """

    m: int = 10
    p: int = 20
    t: int = 20
    g: float = 1.2
    eps: float = 0.1
    detach_bounds: bool = False
    power_grad: str = "full"

    def __post_init__(self):
        if self.power_grad not in POWER_GRAD_MODES:
            raise ValueError(f"power_grad must be one of {POWER_GRAD_MODES}")
        if self.m < 1 or self.p < 1 or self.t < 1:
            raise ValueError("m, p and t must be at least 1")
        if not self.g >= 1.0:
            raise ValueError("the bound multiplier g must be >= 1")
        if not self.eps > 0.0:
            raise ValueError("eps must be positive")


class LinearOperator:
    """A symmetric PSD operator known only through its products.

    ``apply`` maps an (n, *batch_shape, k) node to a node of the same shape.
    """

    def __init__(self, dim: int, apply: Callable[[Node], Node], batch_shape: tuple = (),
                 differentiable: bool = False):
        self.dim = int(dim)
        self._apply = apply
        self.batch_shape = tuple(batch_shape)
        self.differentiable = differentiable

    def __call__(self, v: Node) -> Node:
        shape = v.value.shape
        if shape[:1] != (self.dim,) or shape[1:-1] != self.batch_shape or len(shape) != len(self.batch_shape) + 2:
            raise ValueError(f"operator expects (n={self.dim}, *{self.batch_shape}, k) blocks, got {shape}")
        return self._apply(v)

    @classmethod
    def dense(cls, a) -> "LinearOperator":
        """Operator for an explicit matrix (numpy array or a 2-d node)."""
        node = a if isinstance(a, Node) else constant(a)
        if node.value.ndim != 2 or node.value.shape[0] != node.value.shape[1]:
            raise ValueError("dense operator needs a square matrix")
        return cls(node.value.shape[0], lambda v: ops.matmul(node, v),
                   differentiable=isinstance(a, Node) and a.op != "constant")

    def matvec(self, v) -> np.ndarray:
        """Plain numeric product for a single (unbatched) vector."""
        v = np.asarray(v, dtype=np.float64)
        block = v.reshape((self.dim,) + self.batch_shape + (1,))
        return self(constant(block)).value[..., 0]

    def spot_check(self, rng: Rng, k: int = 3, rtol: float = 1e-8) -> None:
        """Probabilistic symmetry / PSD check on k random pairs."""
        shape = (self.dim,) + self.batch_shape + (k,)
        u = rng.split(0).normal(shape)
        v = rng.split(1).normal(shape)
        au = self(constant(u)).value
        av = self(constant(v)).value
        lhs = np.sum(u * av, axis=0)
        rhs = np.sum(au * v, axis=0)
        scale = np.maximum(np.abs(lhs) + np.abs(rhs), np.finfo(float).tiny)
        if np.any(np.abs(lhs - rhs) > rtol * scale):
            raise NotSymmetricError("operator failed the symmetry spot check")
        if np.any(np.sum(v * av, axis=0) < -rtol * np.sum(np.abs(v * av), axis=0)):
            raise ValueError("operator failed the PSD spot check")


@dataclass(frozen=True)
class ChebyshevCoefficients:
    coeffs: np.ndarray
    interval: tuple[float, float]

    def __post_init__(self):
        a, b = self.interval
        if not a < b:
            raise ValueError("interval must satisfy a < b")

    @property
    def m(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x):
        """Evaluate the interpolant p_m(phi^{-1}(x)) on the original interval."""
        _, phi_inv = rescale_maps(*self.interval, allow_nonpositive=True)
        return np.polynomial.chebyshev.chebval(phi_inv(np.asarray(x, dtype=np.float64)), self.coeffs)


@dataclass
class LogDetEstimate:
    """Estimator output; `logdet` and `lambda_max` are graph nodes."""

    logdet: Node
    lambda_max: Node
    extras: dict = field(default_factory=dict)


def _result(node: Node, differentiable: bool):
    if differentiable:
        return node
    v = node.value
    return float(v) if v.ndim == 0 else np.array(v)


# --- random inputs --------------------------------------------------------------

def draw_start(rng: Rng, dim: int, batch_shape: tuple = ()) -> np.ndarray:
    """Random unit start vectors, shape (dim, *batch, 1)."""
    v = rng.normal((dim,) + tuple(batch_shape))
    v = v / np.linalg.norm(v, axis=0, keepdims=True)
    return v[..., None]


def draw_probes(rng: Rng, dim: int, batch_shape: tuple, p: int) -> np.ndarray:
    """Rademacher probes, shape (dim, *batch, p); probe j uses stream split(j)."""
    shape = (dim,) + tuple(batch_shape)
    return np.stack([rademacher(rng.split(j), shape) for j in range(p)], axis=-1)


def _start_node(op: LinearOperator, rng: Rng | None, start) -> Node:
    if start is None:
        if rng is None:
            raise ValueError("need an Rng or an explicit start vector")
        start = draw_start(rng.split(0), op.dim, op.batch_shape)
    return start if isinstance(start, Node) else constant(start)


def _probe_node(op: LinearOperator, rng: Rng | None, p: int, probes) -> Node:
    if probes is None:
        if rng is None:
            raise ValueError("need an Rng or explicit probes")
        probes = draw_probes(rng.split(1), op.dim, op.batch_shape, p)
    return probes if isinstance(probes, Node) else constant(probes)


def _spread(s: Node, like: Node) -> Node:
    """Replicate a per-operator scalar field (*batch) to a block (n, *batch, k)."""
    k, n = like.value.shape[-1], like.value.shape[0]
    return ops.expand_axis(ops.expand_axis(s, -1, k), 0, n)


# --- power method ---------------------------------------------------------------

def power_iterations(op: LinearOperator, t: int, start: Node, grad: str = "full") -> Node:
    """Rayleigh quotient after t normalized power iterations (graph).

    With grad="rayleigh" the final iterate enters the quotient through
    stop_gradient, so derivatives only flow through the last operator product.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    n = op.dim
    v = start
    for _ in range(t):
        w = op(v)
        nrm = ops.sqrt(ops.inner(w, w))
        if np.all(nrm.value == 0.0):
            return constant(np.zeros(op.batch_shape))
        v = ops.mul(w, ops.expand_axis(ops.reciprocal(nrm), 0, n))
    if grad == "rayleigh":
        v = ops.stop_gradient(v)
    rq = ops.div(ops.inner(v, op(v)), ops.inner(v, v))
    return ops.sum_axis(rq, -1)


def power_method(op: LinearOperator, t: int, rng: Rng | None = None, *, start=None):
    """Estimate of the largest eigenvalue; never exceeds the true value."""
    return _result(power_iterations(op, t, _start_node(op, rng, start)), op.differentiable)


# --- Chebyshev machinery ---------------------------------------------------------

def rescale_maps(a: float, b: float, allow_nonpositive: bool = False):
    """Affine maps phi: [-1, 1] -> [a, b] and its inverse."""
    if not a < b:
        raise ValueError(f"need a < b, got ({a}, {b})")
    if not allow_nonpositive and a <= 0.0:
        raise ValueError("need 0 < a")

    def phi(x):
        return 0.5 * (b - a) * x + 0.5 * (b + a)

    def phi_inv(x):
        return 2.0 / (b - a) * x - (b + a) / (b - a)

    return phi, phi_inv


def chebyshev_nodes(m: int) -> np.ndarray:
    j = np.arange(m + 1)
    return np.cos(np.pi * (j + 0.5) / (m + 1))


def _coefficient_matrix(m: int) -> np.ndarray:
    # W[i, j] such that c = W @ S(x_j): the discrete Chebyshev transform.
    theta = np.pi * (np.arange(m + 1) + 0.5) / (m + 1)
    W = 2.0 / (m + 1) * np.cos(np.outer(np.arange(m + 1), theta))
    W[0] *= 0.5
    return W


def chebyshev_coefficients(fn: Callable, interval: tuple[float, float], m: int) -> ChebyshevCoefficients:
    """Coefficients of the degree-m interpolant of fn(phi(x)) at Chebyshev points."""
    if m < 0:
        raise ValueError("m must be non-negative")
    a, b = interval
    phi, _ = rescale_maps(a, b, allow_nonpositive=True)
    with np.errstate(all="ignore"):
        values = np.asarray(fn(phi(chebyshev_nodes(m))), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("function is not finite at every interpolation node")
    return ChebyshevCoefficients(_coefficient_matrix(m) @ values, (float(a), float(b)))


def log_chebyshev_coefficients(a: Node, b: Node, m: int) -> list[Node]:
    """Graph version of chebyshev_coefficients(log, (a, b), m) for node-valued bounds."""
    batch = a.value.shape
    x = constant(np.broadcast_to(chebyshev_nodes(m).reshape((m + 1,) + (1,) * len(batch)),
                                 (m + 1,) + batch))
    half_width = ops.expand_axis(ops.scale(ops.sub(b, a), 0.5), 0, m + 1)
    mid = ops.expand_axis(ops.scale(ops.add(b, a), 0.5), 0, m + 1)
    fvals = ops.log(ops.add(ops.mul(half_width, x), mid))
    c = ops.matmul(constant(_coefficient_matrix(m)), fvals)
    return [ops.take(c, i, 0) for i in range(m + 1)]


def taylor_coefficients(m: int) -> np.ndarray:
    """Series coefficients of ln(1 - x): c_0 = 0, c_i = -1/i."""
    if m < 1:
        raise ValueError("m must be at least 1")
    c = np.zeros(m + 1)
    c[1:] = -1.0 / np.arange(1, m + 1)
    return c


def _weighted(t: Node, c) -> Node:
    return ops.mul(t, c) if isinstance(c, Node) else ops.scale(t, float(c))


def chebyshev_trace(op, coeffs: Sequence, probes: Node, first: Node | None = None) -> Node:
    """(1/p) sum_j <v_j, sum_i c_i T_i(A) v_j> via the three-term recurrence.

    `op` is any callable on probe blocks whose spectrum lies in [-1, 1].
    Uses exactly m operator applications per probe; `first` may carry an
    already computed op(probes).
    """
    p = probes.value.shape[-1]
    m = len(coeffs) - 1

    def moment(w):
        return ops.sum_axis(ops.inner(probes, w), -1)

    total = _weighted(moment(probes), coeffs[0])
    if m >= 1:
        w_prev, w = probes, op(probes) if first is None else first
        total = ops.add(total, _weighted(moment(w), coeffs[1]))
        for i in range(2, m + 1):
            w_prev, w = w, ops.sub(ops.scale(op(w), 2.0), w_prev)
            total = ops.add(total, _weighted(moment(w), coeffs[i]))
    return ops.scale(total, 1.0 / p)


def stochastic_chebyshev_trace(op: LinearOperator, coeffs, p: int, rng: Rng | None = None, *, probes=None):
    """Stochastic estimate of tr sum_i c_i T_i(A) with Rademacher probes."""
    if isinstance(coeffs, ChebyshevCoefficients):
        coeffs = list(coeffs.coeffs)
    v = _probe_node(op, rng, p, probes)
    return _result(chebyshev_trace(op, list(coeffs), v), op.differentiable)


def hutchinson_trace(op: LinearOperator, p: int, rng: Rng | None = None, *, probes=None):
    """(1/p) sum_j <v_j, A v_j> with Rademacher probes."""
    v = _probe_node(op, rng, p, probes)
    est = ops.scale(ops.sum_axis(ops.inner(v, op(v)), -1), 1.0 / v.value.shape[-1])
    return _result(est, op.differentiable)


def _check_bounds(probes: Node, rescaled: Node) -> None:
    # Rayleigh quotients of the rescaled operator outside [-1, 1] mean a probe
    # saw spectrum outside [eps, g * lambda_max].
    rq = np.sum(probes.value * rescaled.value, axis=0) / np.sum(probes.value ** 2, axis=0)
    if np.any(rq < -1.0 - 1e-9):
        warnings.warn("a probe's Rayleigh quotient fell below the stipulated lower bound eps",
                      SpectralBoundWarning, stacklevel=3)


def _bounded_lambda(op: LinearOperator, cfg: EstimatorConfig, start: Node) -> Node:
    lam = power_iterations(op, cfg.t, start, cfg.power_grad)
    if np.any(lam.value <= 0.0):             # NaN propagates to the non-finite checks
        raise DegenerateOperatorError("power method returned a non-positive lambda_max")
    return ops.stop_gradient(lam) if cfg.detach_bounds else lam


def logdet_chebyshev_graph(op: LinearOperator, cfg: EstimatorConfig, start: Node, probes: Node,
                           check_bounds: bool = True) -> LogDetEstimate:
    lam = _bounded_lambda(op, cfg, start)
    mu = cfg.eps
    nu = ops.scale(lam, cfg.g)
    total = ops.shift(nu, mu)                       # mu + nu
    inv_total = ops.reciprocal(total)
    a = ops.scale(inv_total, mu)
    b = ops.mul(nu, inv_total)
    # Pad the interval so it never collapses (A = cI with eps = c). Coefficients
    # and rescaling share the padded interval, which keeps the composite
    # derivative exact in that limit.
    b = ops.shift(b, INTERVAL_PAD)
    coeffs = log_chebyshev_coefficients(a, b, cfg.m)
    width = ops.sub(b, a)
    # phi^{-1}(A / (mu + nu)) v = (2 / (b - a)) (A v / (mu + nu) - ((a + b) / 2) v)
    slope_k = _spread(ops.scale(ops.reciprocal(width), 2.0), probes)
    inv_total_k = _spread(inv_total, probes)
    mid_k = _spread(ops.scale(ops.add(a, b), 0.5), probes)

    def rescaled(v):
        return ops.mul(ops.sub(ops.mul(op(v), inv_total_k), ops.mul(v, mid_k)), slope_k)

    first = rescaled(probes)
    if check_bounds:
        _check_bounds(probes, first)
    gamma = chebyshev_trace(rescaled, coeffs, probes, first)
    # ln det A = n ln(mu + nu) + ln det(A / (mu + nu))
    logdet = ops.add(ops.scale(ops.log(total), op.dim), gamma)
    return LogDetEstimate(logdet, lam, {"a": a, "b": b, "gamma": gamma})


def logdet_taylor_graph(op: LinearOperator, cfg: EstimatorConfig, start: Node, probes: Node) -> LogDetEstimate:
    lam = _bounded_lambda(op, cfg, start)
    nu = ops.scale(lam, cfg.g)
    inv_nu = _spread(ops.reciprocal(nu), probes)

    def shifted(v):                                 # (I - A / nu) v
        return ops.sub(v, ops.mul(op(v), inv_nu))

    coeffs = taylor_coefficients(cfg.m)
    p = probes.value.shape[-1]
    w = probes
    gamma = None
    for i in range(1, cfg.m + 1):
        w = shifted(w)
        term = ops.scale(ops.sum_axis(ops.inner(probes, w), -1), coeffs[i])
        gamma = term if gamma is None else ops.add(gamma, term)
    gamma = ops.scale(gamma, 1.0 / p)
    logdet = ops.add(ops.scale(ops.log(nu), op.dim), gamma)
    return LogDetEstimate(logdet, lam, {"gamma": gamma})


def stochastic_logdet_chebyshev(op: LinearOperator, cfg: EstimatorConfig, rng: Rng | None = None, *,
                                start=None, probes=None):
    """Chebyshev estimate of ln det A (a node when `op` is differentiable)."""
    est = logdet_chebyshev_graph(op, cfg, _start_node(op, rng, start), _probe_node(op, rng, cfg.p, probes))
    return _result(est.logdet, op.differentiable)


def stochastic_logdet_taylor(op: LinearOperator, cfg: EstimatorConfig, rng: Rng | None = None, *,
                             start=None, probes=None):
    """Taylor-series estimate of ln det A, expanding ln(I - (I - A / nu))."""
    est = logdet_taylor_graph(op, cfg, _start_node(op, rng, start), _probe_node(op, rng, cfg.p, probes))
    return _result(est.logdet, op.differentiable)
