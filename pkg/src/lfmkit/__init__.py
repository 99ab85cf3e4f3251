"""Light field microscopy toolkit: optics, reconstruction, design scans and LFMNet."""
from .errors import ConfigError, ContainerError, DimensionError, LFMError, NumericalError, PoleError
from .kernels import BACKEND
from .lightfield import Image2D, LightField4D, Volume3D

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "ContainerError",
    "DimensionError",
    "Image2D",
    "LFMError",
    "LightField4D",
    "NumericalError",
    "PoleError",
    "Volume3D",
]
