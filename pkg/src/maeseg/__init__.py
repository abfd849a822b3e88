"""Masked-autoencoder pretraining and UNETR segmentation for 3D volumes, at desk scale."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AugmentationError,
    ConfigError,
    MaesegError,
    MetricError,
    NumericError,
    PhantomError,
    ShapeError,
    TrainingError,
)
from .volume import Volume, patchify, preprocess, read_volume, unpatchify, write_volume  # noqa: E402

__all__ = [
    "AugmentationError",
    "ConfigError",
    "MaesegError",
    "MetricError",
    "NumericError",
    "PhantomError",
    "ShapeError",
    "TrainingError",
    "Volume",
    "patchify",
    "preprocess",
    "read_volume",
    "unpatchify",
    "write_volume",
    "__version__",
]
