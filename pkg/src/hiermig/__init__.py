"""Classical and hierarchical Bayesian models of origin-destination migration flows."""

from hiermig.errors import NumericalError, ValidationError

__all__ = ["NumericalError", "ValidationError"]
__version__ = "0.1.0"
