"""Gradient-norm misclassification detector toolkit."""

from .version import __version__

__all__ = ["__version__"]
