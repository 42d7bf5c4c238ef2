"""Desk-scale detection laboratory: a from-scratch differentiable detector
with rank-driven adaptive query counts, a synthetic crowded-scene benchmark,
and pedestrian-detection metrics."""

__version__ = "0.1.0"

from .autodiff import Parameter, Tensor, backward, finite_difference_check, no_grad
from .errors import ConfigError, DimensionError, NumericError, UsageError

__all__ = [
    "Parameter",
    "Tensor",
    "backward",
    "finite_difference_check",
    "no_grad",
    "ConfigError",
    "DimensionError",
    "NumericError",
    "UsageError",
    "__version__",
]
