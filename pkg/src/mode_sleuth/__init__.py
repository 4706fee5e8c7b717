"""Inference of damped real and complex modes of linear stochastic processes
from streaming, irregular, partial observations."""

from .errors import *  # noqa: F401,F403
from .model import (  # noqa: F401
    FOU,
    OU,
    Langevin,
    LtiSystem,
    ModeModel,
    ModeShapes,
    ModeSpec,
    kernel_eval,
    lagged_covariance,
    mean_response,
    mode_covariance,
    mode_realize,
    parameter_dimension,
    stationary_covariance,
)

__version__ = "0.1.0"
