"""Implicit densities: the metric M_f = J^T J, log-likelihoods and their gradients.

For a model f: Z -> X the implicit log-likelihood of x = f(z) is

    ln Q(x) = ln P_Z(z) - 1/2 ln det M_f(z),

and for a model f: X -> Z (which maps data into the prior)

    ln Q(x) = ln P_Z(f(x)) + 1/2 ln det M_f(x).

The log-determinant comes from the stochastic Chebyshev estimator, so every
quantity here is a differentiable graph in the parameters and the base point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, constant, ops
from .autodiff import grad as _grad
from .autodiff import jvp, vjp
from .estimators import (EstimatorConfig, LinearOperator, draw_probes, draw_start,
                         logdet_chebyshev_graph, power_iterations)
from .linalg import NotPositiveDefiniteError, Rng, cholesky_logdet
from .models import X_TO_Z, Model

ASSEMBLED_MAX_DIM = 4


class SingularJacobianError(ValueError):
    pass


def jacobian_columns(model: Model, point: Node, params: dict[str, Node]) -> tuple[Node, Node]:
    """Forward pass plus J as an (n_out, *batch, n_in) node, one jvp per input axis.

    Returns (output, J). The output is f(point) with shape (n_out, *batch).
    """
    n = model.dim_in
    if point.value.shape[0] != n:
        raise ValueError(f"point must have leading dimension {n}")
    batch = point.value.shape[1:]
    rep = ops.expand_axis(point, -1, n)
    out = model.forward(rep, params)
    basis = np.zeros((n,) + batch + (n,))
    for k in range(n):
        basis[k, ..., k] = 1.0
    cols = jvp(out, [rep], [constant(basis)])
    return ops.take(out, 0, -1), cols


class MetricOperator(LinearOperator):
    """M_f(point) = J_f^T J_f as a differentiable linear operator.

    ``mode="matrix-free"`` applies v -> J^T (J v) through one jvp and one vjp
    of the model per application. ``mode="assembled"`` first builds J from
    dim_in jvps and then applies J^T J from its entries; it is the same
    function of (params, point) but much cheaper when dim_in is small.
    ``"auto"`` picks assembled for dim_in <= 4.
    """

    def __init__(self, model: Model, point: Node, params: dict[str, Node] | None = None, mode: str = "auto"):
        if mode == "auto":
            mode = "assembled" if model.dim_in <= ASSEMBLED_MAX_DIM else "matrix-free"
        if mode not in ("assembled", "matrix-free"):
            raise ValueError(f"unknown metric mode {mode!r}")
        self.model = model
        self.point = point
        self.params = model.bind() if params is None else params
        self.mode = mode
        n = model.dim_in
        self._cache: dict[int, object] = {}
        if mode == "assembled":
            self.output, self.jacobian = jacobian_columns(model, point, self.params)
            cols = [ops.take(self.jacobian, k, -1) for k in range(n)]
            self.entries = [[None] * n for _ in range(n)]
            for k in range(n):
                for l in range(k, n):
                    self.entries[k][l] = self.entries[l][k] = ops.inner(cols[k], cols[l])
            self.matrix = ops.stack([ops.stack(row, 0) for row in self.entries], 0)
            apply = self._apply_assembled
        else:
            self.output = model.forward(point, self.params)
            self.jacobian = None
            apply = self._apply_matrix_free
        super().__init__(n, apply, point.value.shape[1:], differentiable=True)

    def _apply_assembled(self, v: Node) -> Node:
        return ops.batch_matvec(self.matrix, v)

    def _apply_matrix_free(self, v: Node) -> Node:
        k = v.value.shape[-1]
        if k not in self._cache:
            rep = ops.expand_axis(self.point, -1, k)
            self._cache[k] = (rep, self.model.forward(rep, self.params))
        rep, out = self._cache[k]
        jv = jvp(out, [rep], [v])
        return vjp(out, [rep], jv)[0]

    def dense(self) -> np.ndarray:
        """Explicit metric values, shape (*batch, n, n)."""
        if self.jacobian is not None:
            J = self.jacobian.value
        else:
            _, Jn = jacobian_columns(self.model, self.point, self.params)
            J = Jn.value
        return np.einsum("i...k,i...l->...kl", J, J)


def metric_apply(op: MetricOperator, v) -> np.ndarray:
    """J^T J v for a single base point and vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.dim,):
        raise ValueError(f"expected a vector of length {op.dim}")
    return op.matvec(v)


def explicit_metric(model: Model, point) -> np.ndarray:
    """Dense M_f at `point` ((n,) or (n, *batch)) assembled from jvp columns."""
    point = np.asarray(point, dtype=np.float64)
    out, J = jacobian_columns(model, constant(point), {k: constant(v) for k, v in model.params.items()})
    return np.einsum("i...k,i...l->...kl", J.value, J.value)


@dataclass
class Likelihood:
    """Graph pieces of one (batched) implicit log-likelihood evaluation."""

    loglik: Node
    logdet: Node
    lambda_max: Node
    log_prior: Node
    output: Node
    operator: MetricOperator
    start: Node
    probes: Node


def _sign(model: Model) -> float:
    return 0.5 if model.direction == X_TO_Z else -0.5


def log_likelihood(model: Model, point, cfg: EstimatorConfig, rng: Rng | None = None, *,
                   params: dict[str, Node] | None = None, start=None, probes=None,
                   mode: str = "auto", check_bounds: bool = True) -> Likelihood:
    """Seeded estimate of ln Q at a batch of base points.

    `point` is z for z->x models and x for x->z models, laid out (n, *batch).
    Pass a parameter node as `point` to differentiate with respect to it.
    """
    point = point if isinstance(point, Node) else constant(point)
    params = model.bind() if params is None else params
    op = MetricOperator(model, point, params, mode)
    if start is None:
        start = draw_start(rng.split(0), op.dim, op.batch_shape)
    if probes is None:
        probes = draw_probes(rng.split(1), op.dim, op.batch_shape, cfg.p)
    start = start if isinstance(start, Node) else constant(start)
    probes = probes if isinstance(probes, Node) else constant(probes)
    est = logdet_chebyshev_graph(op, cfg, start, probes, check_bounds=check_bounds)
    latent = op.output if model.direction == X_TO_Z else point
    log_prior = model.prior.log_density(latent)
    loglik = ops.add(log_prior, ops.scale(est.logdet, _sign(model)))
    return Likelihood(loglik, est.logdet, est.lambda_max, log_prior, op.output, op, start, probes)


def exact_log_likelihood(model: Model, point) -> np.ndarray | float:
    """ln Q with the log-determinant from a Cholesky factorization of M_f."""
    point = np.asarray(point, dtype=np.float64)
    M = explicit_metric(model, point)
    try:
        logdet = cholesky_logdet(M)
    except NotPositiveDefiniteError as exc:
        raise SingularJacobianError("metric is singular at the given point") from exc
    latent = model(point) if model.direction == X_TO_Z else point
    out = model.prior.log_density_np(latent) + _sign(model) * logdet
    return float(out) if np.ndim(out) == 0 else out


def mean_log_likelihood(model: Model, points, cfg: EstimatorConfig, rng: Rng, **kw) -> tuple[Node, dict, Likelihood]:
    """Mean seeded log-likelihood over a batch (n, B) and the parameter nodes."""
    params = model.bind()
    lik = log_likelihood(model, points, cfg, rng, params=params, **kw)
    return ops.mean(lik.loglik), params, lik


def spectral_grad(model: Model, points, cfg: EstimatorConfig, rng: Rng, **kw) -> np.ndarray:
    """Gradient over the model parameters of the batch-mean seeded ln Q.

    A pure function of (parameters, points, rng): the probes and the power
    method start vectors are fixed by the rng.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] == 0:
        raise ValueError("points must be a non-empty (n, B) batch")
    mean, params, _ = mean_log_likelihood(model, points, cfg, rng, **kw)
    return model_grad(model, mean, params)


def exact_grad(model: Model, points) -> np.ndarray:
    """Gradient of the batch-mean exact ln Q, using the Jacobian graph.

    ln det M is computed in-graph for the small (<= 4) dims the exact oracle
    supports, via a Cholesky-free closed form on the entries of M.
    """
    points = np.asarray(points, dtype=np.float64)
    params = model.bind()
    op = MetricOperator(model, constant(points), params, mode="assembled")
    logdet = _logdet_small(op.entries)
    latent = op.output if model.direction == X_TO_Z else op.point
    loglik = ops.add(model.prior.log_density(latent), ops.scale(logdet, _sign(model)))
    return model_grad(model, ops.mean(loglik), params)


def model_grad(model: Model, scalar: Node, params: dict[str, Node]) -> np.ndarray:
    """Flattened gradient in parameter order, zero in the frozen slots."""
    live = [k for k in params if k not in model.frozen]
    if not live:
        return np.zeros(sum(n.value.size for n in params.values()))
    parts = dict(zip(live, _split_flat(_grad(scalar, [params[k] for k in live]),
                                       [params[k].value.size for k in live])))
    return np.concatenate([parts[k] if k in parts else np.zeros(params[k].value.size) for k in params])


def _split_flat(flat: np.ndarray, sizes) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(sizes)[:-1]) if sizes else []


def _logdet_small(e) -> Node:
    n = len(e)
    if n == 1:
        return ops.log(e[0][0])
    if n == 2:
        return ops.log(ops.sub(ops.mul(e[0][0], e[1][1]), ops.mul(e[0][1], e[1][0])))
    raise NotImplementedError("in-graph exact log-det only for n <= 2")


def spectral_norm_penalty(op: LinearOperator, rho: float, cfg: EstimatorConfig, rng: Rng | None = None, *,
                          start=None, lambda_max: Node | None = None) -> Node:
    """rho * lambda_max(M_f) as a graph through the recorded power iterations.

    Reuses `lambda_max` from a log-det estimate when given.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if lambda_max is None:
        if start is None:
            start = constant(draw_start(rng.split(0), op.dim, op.batch_shape))
        lambda_max = power_iterations(op, cfg.t, start if isinstance(start, Node) else constant(start),
                                      cfg.power_grad)
    return ops.scale(lambda_max, rho)


def relative_error(est: float, exact: float):
    """ln l_hat - ln l: the estimate-to-truth log-likelihood ratio."""
    return np.asarray(est) - np.asarray(exact) if np.ndim(est) or np.ndim(exact) else float(est) - float(exact)


__all__ = [
    "MetricOperator", "Likelihood", "SingularJacobianError", "explicit_metric", "exact_grad",
    "exact_log_likelihood", "jacobian_columns", "log_likelihood", "mean_log_likelihood", "metric_apply",
    "model_grad",
    "relative_error", "spectral_grad", "spectral_norm_penalty",
]
