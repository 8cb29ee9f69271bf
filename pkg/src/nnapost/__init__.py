"""Residual-based a posteriori error estimators as training losses for neural networks."""

__version__ = "0.1.0"
