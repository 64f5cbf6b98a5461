"""Priors and the differentiable models f whose implicit densities we study."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Node, ParameterStore, constant, ops
from .linalg import Rng

Z_TO_X = "z->x"
X_TO_Z = "x->z"


class Prior:
    """Spherical standard normal or uniform box [-h, h]^d."""

    def __init__(self, dim: int, kind: str = "normal", half_width: float = 1.0):
        if kind not in ("normal", "uniform"):
            raise ValueError(f"unknown prior kind {kind!r}")
        if dim < 1 or half_width <= 0:
            raise ValueError("bad prior parameters")
        self.dim, self.kind, self.half_width = int(dim), kind, float(half_width)

    def log_density(self, z: Node) -> Node:
        """Per-point log density of a (dim, *batch) node."""
        if z.value.shape[0] != self.dim:
            raise ValueError(f"prior expects dimension {self.dim}, got {z.value.shape[0]}")
        if self.kind == "normal":
            return ops.shift(ops.scale(ops.inner(z, z), -0.5), -0.5 * self.dim * math.log(2 * math.pi))
        # Flat inside the box; the zero-scaled term keeps z in the graph.
        return ops.shift(ops.scale(ops.inner(z, z), 0.0), -self.dim * math.log(2 * self.half_width))

    def log_density_np(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "normal":
            return -0.5 * np.sum(z * z, axis=0) - 0.5 * self.dim * math.log(2 * math.pi)
        inside = np.all(np.abs(z) <= self.half_width, axis=0)
        return np.where(inside, -self.dim * math.log(2 * self.half_width), -np.inf)

    def sample(self, rng: Rng, batch_shape=()) -> np.ndarray:
        if isinstance(batch_shape, int):
            batch_shape = (batch_shape,)
        shape = (self.dim,) + tuple(batch_shape)
        if self.kind == "normal":
            return rng.normal(shape)
        return rng.uniform(shape, -self.half_width, self.half_width)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "kind": self.kind, "half_width": self.half_width}


class Model:
    """Base class: a differentiable map R^dim_in -> R^dim_out over a ParameterStore.

    Inputs are laid out feature-first, (dim_in, *batch). Parameters listed in
    `frozen` are bound as constants, so gradients with respect to them are zero.
    """

    kind = "model"

    def __init__(self, params: ParameterStore, dim_in: int, dim_out: int, direction: str = Z_TO_X,
                 prior: Prior | None = None, frozen=()):
        if direction not in (Z_TO_X, X_TO_Z):
            raise ValueError(f"unknown direction {direction!r}")
        self.params = params
        self.dim_in, self.dim_out = dim_in, dim_out
        self.direction = direction
        self.latent_dim = dim_in if direction == Z_TO_X else dim_out
        self.prior = prior or Prior(self.latent_dim)
        self.frozen = frozenset(frozen)

    def bind(self) -> dict[str, Node]:
        nodes = self.params.bind()
        for name in self.frozen:
            nodes[name] = constant(self.params[name], name=name)
        return nodes

    def forward(self, x: Node, p: dict[str, Node]) -> Node:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.forward(constant(x), {k: constant(v) for k, v in self.params.items()}).value

    def config(self) -> dict:
        return {"kind": self.kind, "dim_in": self.dim_in, "dim_out": self.dim_out,
                "direction": self.direction, "prior": self.prior.to_dict()}


class ResidualFlow(Model):
    """Residual network of bottleneck blocks x + W3 a(W2 a(W1 x + b1) + b2) + b3.

    `a` is LeakyReLU. Defaults: four blocks, hidden width 32, on R^2.
    """

    kind = "residual"

    def __init__(self, params: ParameterStore, dim: int = 2, hidden: int = 32, blocks: int = 4,
                 direction: str = Z_TO_X, prior: Prior | None = None, frozen=()):
        self.hidden, self.blocks = hidden, blocks
        super().__init__(params, dim, dim, direction, prior, frozen)

    @classmethod
    def init(cls, rng: Rng, dim: int = 2, hidden: int = 32, blocks: int = 4, direction: str = Z_TO_X,
             prior: Prior | None = None) -> "ResidualFlow":
        # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
        store = ParameterStore()
        shapes = [(hidden, dim), (hidden, hidden), (dim, hidden)]
        for k in range(blocks):
            for layer, (h, n) in enumerate(shapes, start=1):
                bound = 1.0 / math.sqrt(n)
                r = rng.split(3 * k + layer)
                store.add(f"block{k}.w{layer}", r.split(0).uniform((h, n), -bound, bound))
                store.add(f"block{k}.b{layer}", r.split(1).uniform((h,), -bound, bound))
        return cls(store, dim, hidden, blocks, direction, prior)

    def forward(self, x: Node, p: dict[str, Node]) -> Node:
        if x.value.shape[0] != self.dim_in:
            raise ValueError(f"expected input dimension {self.dim_in}, got {x.value.shape[0]}")
        for k in range(self.blocks):
            h = ops.leaky_relu(ops.bias_add(ops.matmul(p[f"block{k}.w1"], x), p[f"block{k}.b1"]))
            h = ops.leaky_relu(ops.bias_add(ops.matmul(p[f"block{k}.w2"], h), p[f"block{k}.b2"]))
            x = ops.add(x, ops.bias_add(ops.matmul(p[f"block{k}.w3"], h), p[f"block{k}.b3"]))
        return x

    def config(self) -> dict:
        return {**super().config(), "hidden": self.hidden, "blocks": self.blocks}


class LinearModel(Model):
    """f(z) = A z + b."""

    kind = "linear"

    def __init__(self, a, bias=None, direction: str = Z_TO_X, prior: Prior | None = None, frozen=()):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        store = ParameterStore({"A": a, "b": np.zeros(a.shape[0]) if bias is None else bias})
        super().__init__(store, a.shape[1], a.shape[0], direction, prior, frozen)

    @classmethod
    def from_store(cls, store: ParameterStore, direction=Z_TO_X, prior=None):
        return cls(store["A"], store["b"], direction, prior)

    def forward(self, x: Node, p: dict[str, Node]) -> Node:
        return ops.bias_add(ops.matmul(p["A"], x), p["b"])


class ScaleModel(Model):
    """f(z) = c z with a single scalar parameter c."""

    kind = "scale"

    def __init__(self, c: float, dim: int = 2, direction: str = Z_TO_X, prior: Prior | None = None, frozen=()):
        super().__init__(ParameterStore({"c": np.array(float(c))}), dim, dim, direction, prior, frozen)

    @classmethod
    def from_store(cls, store: ParameterStore, dim=2, direction=Z_TO_X, prior=None):
        return cls(float(store["c"]), dim, direction, prior)

    def forward(self, x: Node, p: dict[str, Node]) -> Node:
        return ops.mul(ops.fill(p["c"], x.value.shape), x)


def identity_model(dim: int = 2, direction: str = Z_TO_X, prior: Prior | None = None) -> LinearModel:
    return LinearModel(np.eye(dim), direction=direction, prior=prior)


def model_from_config(cfg: dict, store: ParameterStore) -> Model:
    prior = Prior(**cfg["prior"]) if "prior" in cfg else None
    kind = cfg["kind"]
    if kind == "residual":
        return ResidualFlow(store, cfg["dim_in"], cfg["hidden"], cfg["blocks"], cfg["direction"], prior)
    if kind == "linear":
        return LinearModel.from_store(store, cfg["direction"], prior)
    if kind == "scale":
        return ScaleModel.from_store(store, cfg["dim_in"], cfg["direction"], prior)
    raise ValueError(f"unknown model kind {kind!r}")
