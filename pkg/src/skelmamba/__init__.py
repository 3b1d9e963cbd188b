"""Skeleton action recognition with channel-split multi-directional state-space scanning."""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
