"""Gradient inversion from a single averaged gradient (MAGIA and DLG)."""
from gradsense.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
