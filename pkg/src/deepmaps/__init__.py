"""Fine-grained urban PM2.5 inference from fixed and mobile sensors."""

from .core import (
    ConfigurationError,
    DeepMapsError,
    GridSpec,
    InputError,
    LabelSet,
    SchemaError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DeepMapsError",
    "GridSpec",
    "InputError",
    "LabelSet",
    "SchemaError",
    "ShapeError",
    "__version__",
]
