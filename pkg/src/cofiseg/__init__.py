"""cofiseg: coarse-to-fine volumetric segmentation on a small autodiff core."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND", "__version__"]
