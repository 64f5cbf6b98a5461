"""Small graph-based autodiff with differentiable derivative graphs."""
from . import ops
from .core import Node, NotReachableError, PRIMITIVES, ShapeError, constant, parameter
from .params import ParameterStore
from .transforms import Program, evaluate, grad, grad_nodes, jvp, vjp

__all__ = [
    "Node", "NotReachableError", "PRIMITIVES", "ShapeError", "ParameterStore", "Program",
    "constant", "evaluate", "grad", "grad_nodes", "jvp", "ops", "parameter", "vjp",
]
