"""Many-input attention mechanisms on a small float64 autodiff core."""
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
