"""Differentiable multi-scale image registration with implicit gradients."""

from ._accel import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
