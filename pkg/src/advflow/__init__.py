"""Adversarial flow models on low-dimensional synthetic distributions."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
