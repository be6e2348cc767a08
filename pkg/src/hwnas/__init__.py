"""Hardware-aware architecture search for a segmentation + quality-control
network pair, on a self-contained numpy autodiff engine."""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
