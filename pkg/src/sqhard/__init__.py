"""Moment-matched hard instances for agnostic halfspace and ReLU learning under Gaussian marginals."""

__version__ = "0.1.0"
