"""Semantically masked windowed-attention segmentation, desk scale."""

__version__ = "0.1.0"

from semask.encoder import EncoderConfig
from semask.model import SegModel
from semask.tensor import Tensor, backward, check_gradients, no_grad

__all__ = [
    "EncoderConfig",
    "SegModel",
    "Tensor",
    "backward",
    "check_gradients",
    "no_grad",
    "__version__",
]
