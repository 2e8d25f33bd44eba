"""Range-image LiDAR panoptic segmentation toolkit."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    DataError,
    InfeasibleError,
    LidarpanError,
    ShapeError,
    ValidationError,
)
from .tensor import Param, Tensor  # noqa: F401
