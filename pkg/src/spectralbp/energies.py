"""Two-dimensional test densities.

U1-U4 are the classic normalizing-flow potentials, p(x) ∝ exp(-U(x)):

    w1(x) = sin(2π x1 / 4)
    w2(x) = 3 exp(-((x1 - 1) / 0.6)^2 / 2)
    w3(x) = 3 σ((x1 - 1) / 0.3)

    U1 = ((‖x‖ - 2) / 0.4)^2 / 2 - ln(exp(-((x1 - 2) / 0.6)^2 / 2) + exp(-((x1 + 2) / 0.6)^2 / 2))
    U2 = ((x2 - w1) / 0.4)^2 / 2
    U3 = -ln(exp(-((x2 - w1) / 0.35)^2 / 2) + exp(-((x2 - w1 + w2) / 0.35)^2 / 2))
    U4 = -ln(exp(-((x2 - w1) / 0.4)^2 / 2) + exp(-((x2 - w1 + w3) / 0.35)^2 / 2))

The crescent and the ring mixture are normalized and can be sampled:

    crescent:      x1 ~ N(0, 1),  x2 = x1^2 / 2 + N(0, 0.5^2)
    ring-mixture:  8 equal-weight N(c_k, 0.2^2 I), c_k = 2.5 (cos 2πk/8, sin 2πk/8)

Every density is written once as a graph on (2, *batch) nodes; the numpy
version evaluates that graph on constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Node, constant, ops
from .linalg import Rng

RING_MODES = 8
RING_RADIUS = 2.5
RING_SIGMA = 0.2
CRESCENT_SIGMA = 0.5


def _coords(x: Node) -> tuple[Node, Node]:
    if x.value.shape[0] != 2:
        raise ValueError("test energies are defined on R^2")
    return ops.take(x, 0, 0), ops.take(x, 1, 0)


def _half_sq(x: Node, width: float) -> Node:
    # (x / width)^2 / 2
    return ops.scale(ops.square(x), 0.5 / width ** 2)


def _w1(x1):
    return ops.sin(ops.scale(x1, 2 * math.pi / 4))


def _w2(x1):
    return ops.scale(ops.exp(ops.scale(_half_sq(ops.shift(x1, -1.0), 0.6), -1.0)), 3.0)


def _w3(x1):
    return ops.scale(ops.sigmoid(ops.scale(ops.shift(x1, -1.0), 1 / 0.3)), 3.0)


def _neg_lae(a: Node, b: Node) -> Node:
    # -ln(exp(-a) + exp(-b))
    return ops.scale(ops.logaddexp(ops.scale(a, -1.0), ops.scale(b, -1.0)), -1.0)


def u1(x: Node) -> Node:
    x1, _ = _coords(x)
    ring = _half_sq(ops.shift(ops.sqrt(ops.inner(x, x)), -2.0), 0.4)
    return ops.add(ring, _neg_lae(_half_sq(ops.shift(x1, -2.0), 0.6), _half_sq(ops.shift(x1, 2.0), 0.6)))


def u2(x: Node) -> Node:
    x1, x2 = _coords(x)
    return _half_sq(ops.sub(x2, _w1(x1)), 0.4)


def u3(x: Node) -> Node:
    x1, x2 = _coords(x)
    d = ops.sub(x2, _w1(x1))
    return _neg_lae(_half_sq(d, 0.35), _half_sq(ops.add(d, _w2(x1)), 0.35))


def u4(x: Node) -> Node:
    x1, x2 = _coords(x)
    d = ops.sub(x2, _w1(x1))
    return _neg_lae(_half_sq(d, 0.4), _half_sq(ops.add(d, _w3(x1)), 0.35))


def crescent_log_density(x: Node) -> Node:
    x1, x2 = _coords(x)
    dev = ops.sub(x2, ops.scale(ops.square(x1), 0.5))
    q = ops.add(_half_sq(x1, 1.0), _half_sq(dev, CRESCENT_SIGMA))
    return ops.shift(ops.scale(q, -1.0), -math.log(2 * math.pi * CRESCENT_SIGMA))


def ring_centers() -> np.ndarray:
    ang = 2 * math.pi * np.arange(RING_MODES) / RING_MODES
    return RING_RADIUS * np.stack([np.cos(ang), np.sin(ang)])


def ring_log_density(x: Node) -> Node:
    x1, x2 = _coords(x)
    terms = []
    for cx, cy in ring_centers().T:
        q = ops.add(_half_sq(ops.shift(x1, -cx), RING_SIGMA), _half_sq(ops.shift(x2, -cy), RING_SIGMA))
        terms.append(ops.scale(q, -1.0))
    acc = terms[0]
    for t in terms[1:]:
        acc = ops.logaddexp(acc, t)
    return ops.shift(acc, -math.log(RING_MODES * 2 * math.pi * RING_SIGMA ** 2))


def sample_crescent(rng: Rng, n: int) -> np.ndarray:
    x1 = rng.split(0).normal((n,))
    x2 = 0.5 * x1 ** 2 + CRESCENT_SIGMA * rng.split(1).normal((n,))
    return np.stack([x1, x2])


def sample_ring(rng: Rng, n: int) -> np.ndarray:
    k = rng.split(0).generator().integers(0, RING_MODES, size=n)
    return ring_centers()[:, k] + RING_SIGMA * rng.split(1).normal((2, n))


@dataclass(frozen=True)
class Energy:
    """A named 2D density, log p known up to a constant unless `normalized`."""

    name: str
    graph: Callable[[Node], Node]
    normalized: bool = False
    sampler: Callable[[Rng, int], np.ndarray] | None = None

    def log_density(self, x: Node) -> Node:
        """Per-point log density of a (2, *batch) node."""
        return self.graph(x)

    def log_density_np(self, x) -> np.ndarray:
        return self.graph(constant(np.asarray(x, dtype=np.float64))).value

    @property
    def can_sample(self) -> bool:
        return self.sampler is not None

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        if self.sampler is None:
            raise ValueError(f"energy {self.name!r} has no sampler")
        return self.sampler(rng, n)


def _neg(fn):
    return lambda x: ops.scale(fn(x), -1.0)


ENERGIES: dict[str, Energy] = {
    "u1": Energy("u1", _neg(u1)),
    "u2": Energy("u2", _neg(u2)),
    "u3": Energy("u3", _neg(u3)),
    "u4": Energy("u4", _neg(u4)),
    "crescent": Energy("crescent", crescent_log_density, True, sample_crescent),
    "ring-mixture": Energy("ring-mixture", ring_log_density, True, sample_ring),
}


def get_energy(name: str) -> Energy:
    key = name.lower()
    if key not in ENERGIES:
        raise KeyError(f"unknown energy {name!r}; choose from {sorted(ENERGIES)}")
    return ENERGIES[key]


def standard_normal_energy(dim: int = 2) -> Energy:
    """N(0, I) as an energy, handy for closed-form checks."""
    const = -0.5 * dim * math.log(2 * math.pi)
    return Energy("normal", lambda x: ops.shift(ops.scale(ops.inner(x, x), -0.5), const), True,
                  lambda rng, n: rng.normal((dim, n)))
