"""flowforge: multi-index flow combinatorics and a desk-scale numerical validator
for singular stochastic heat equations with gradient and multiplicative noise terms."""

from .errors import DomainError, FlowforgeError, NumericError, ResolutionError, ResourceError
from .multiindex import ModelParams, PreMultiIndex, derive_params

__all__ = [
    "DomainError",
    "FlowforgeError",
    "NumericError",
    "ResolutionError",
    "ResourceError",
    "ModelParams",
    "PreMultiIndex",
    "derive_params",
]
__version__ = "0.1.0"
