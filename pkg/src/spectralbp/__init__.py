"""Stochastic log-determinant estimation and spectral backpropagation for implicit densities."""
from .estimators import EstimatorConfig, LinearOperator, stochastic_logdet_chebyshev, stochastic_logdet_taylor
from .linalg import Rng

__version__ = "0.1.0"

__all__ = ["EstimatorConfig", "LinearOperator", "Rng", "stochastic_logdet_chebyshev",
           "stochastic_logdet_taylor", "__version__"]
