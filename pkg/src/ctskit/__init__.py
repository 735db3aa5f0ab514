"""Consistency-trajectory distillation against analytic score oracles, plus
layout verification, camera paths, texture fields and box settling."""
__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
from .errors import (  # noqa: E402
    CtsKitError, NumericalError, ParameterError, ParseError, RefinerError, SingularityError,
)

__all__ = [
    "__version__", "BACKEND",
    "CtsKitError", "NumericalError", "ParameterError", "ParseError", "RefinerError", "SingularityError",
]
