"""Two-stage multi-scale graph-reasoning segmentation on a tape-based
float64 autodiff core."""

from . import ops
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "Tape", "backward", "no_grad", "ops", "__version__"]
