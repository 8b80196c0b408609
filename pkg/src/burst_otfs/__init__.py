"""Burst-sparsity variational Bayesian channel estimation for massive MIMO-OTFS."""

__version__ = "0.1.0"
