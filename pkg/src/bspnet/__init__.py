"""Hybrid Bayesian network inference with adaptive BSP-tree discretization."""

__version__ = "0.1.0"
