from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .core import Node, parameter


class ParameterStore:
    """Named float64 tensors with a stable order.

    `bind()` turns the current values into parameter leaves for one graph;
    `flatten`/`unflatten` map to and from a single vector in insertion order.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._tensors[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._tensors[name].shape:
            raise ValueError(f"shape change for {name!r}: {value.shape}")
        self._tensors[name] = value.copy()

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def bind(self) -> dict[str, Node]:
        return {k: parameter(v, name=k) for k, v in self._tensors.items()}

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def unflatten(self, vec) -> "ParameterStore":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got {vec.shape}")
        out, i = {}, 0
        for k, v in self._tensors.items():
            out[k] = vec[i:i + v.size].reshape(v.shape).copy()
            i += v.size
        return ParameterStore(out)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._tensors.items()})

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParameterStore({shapes})"
