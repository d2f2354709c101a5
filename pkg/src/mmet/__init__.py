"""Mesh transformer for PDE surrogates on a small numpy autodiff core."""

from .kernels import COMPILED

__version__ = "0.1.0"

__all__ = ["COMPILED", "__version__"]
