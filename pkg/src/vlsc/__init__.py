"""Desk-scale vision-language pre-training with semantic completion."""

__version__ = "0.1.0"

from .tensor import ParamRegistry, Tensor

__all__ = ["ParamRegistry", "Tensor", "__version__"]
