"""Geographic-knowledge supervised pre-training for remote sensing imagery."""

from .errors import GeoKRError

__version__ = "0.1.0"

__all__ = ["GeoKRError", "__version__"]
