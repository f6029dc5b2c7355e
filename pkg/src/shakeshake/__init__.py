"""Two-branch residual networks with stochastic branch mixing (shake-shake) on a small numpy autodiff engine."""

from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    NonFiniteError,
    ShakeError,
    UndefinedCorrelationError,
    UsageError,
)
from .models import ModelSpec, build_model, count_params
from .shake import ShakeCoefficients, ShakeConfig, shake_combine, step_coefficients
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "FormatError",
    "ModelSpec",
    "NonFiniteError",
    "Parameter",
    "ShakeCoefficients",
    "ShakeConfig",
    "ShakeError",
    "Tensor",
    "UndefinedCorrelationError",
    "UsageError",
    "backward",
    "build_model",
    "count_params",
    "no_grad",
    "shake_combine",
    "step_coefficients",
]
