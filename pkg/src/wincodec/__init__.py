"""wincodec: desk-scale learned image codec with window-based attention."""

from . import tensor
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
