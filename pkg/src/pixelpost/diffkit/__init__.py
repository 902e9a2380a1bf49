"""Dense-array arithmetic with reverse-mode gradients over a fixed layer catalog."""

from . import ops
from .check import GradCheck, check_gradients, finite_difference_gradient, relative_error
from .core import (
    PRIMITIVES,
    Node,
    ShapeError,
    Trace,
    TraceError,
    evaluate,
    gradient,
    replay,
    value_and_grad,
    value_of,
)

__all__ = [
    "GradCheck",
    "Node",
    "PRIMITIVES",
    "ShapeError",
    "Trace",
    "TraceError",
    "check_gradients",
    "evaluate",
    "finite_difference_gradient",
    "gradient",
    "ops",
    "relative_error",
    "replay",
    "value_and_grad",
    "value_of",
]
