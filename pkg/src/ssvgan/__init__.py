"""Self-supervised video GAN: transformation prediction as an auxiliary task."""

__version__ = "0.1.0"

from . import cli, downstream, models, synthdata, training, transforms  # noqa: F401
from .errors import (  # noqa: F401
    ConfigurationError,
    DataError,
    NumericError,
    ParameterError,
    ShapeError,
    SsvganError,
)
