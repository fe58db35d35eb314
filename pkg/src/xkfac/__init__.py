"""Kronecker-factored curvature approximations for networks with batch
normalization, and a quadratic-penalty continual learning driver built on
merged weights."""

from . import curvature, data, driver, linalg, net, oracle, penalty

__all__ = ["curvature", "data", "driver", "linalg", "net", "oracle", "penalty"]
__version__ = "0.1.0"
