"""igsplat: hybrid point-cloud + multi-level tri-plane Gaussian splatting
with progressive training and a compact compression container."""

__version__ = "0.1.0"

from .core import (
    BoundingBox,
    Camera,
    GaussianAttributes,
    ImageBuffer,
    PointCloud,
    make_cubic_bbox,
    normalize_point,
)
from .model import IgsModel

__all__ = [
    "BoundingBox",
    "Camera",
    "GaussianAttributes",
    "ImageBuffer",
    "PointCloud",
    "IgsModel",
    "make_cubic_bbox",
    "normalize_point",
    "__version__",
]
