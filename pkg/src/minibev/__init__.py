"""Desk-scale multi-task BEV perception on synthetic multi-view driving scenes."""

from minibev.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
