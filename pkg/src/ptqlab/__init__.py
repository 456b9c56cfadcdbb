"""Desk-scale post-training quantization lab.

Block-wise reconstruction with stochastic quantization dropping on small
networks, plus numerical verification of the activation-noise-to-weight
transplant and flatness diagnostics.
"""

__version__ = "0.1.0"

from . import tensor  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    HookError,
    NumericsError,
    NumericsWarning,
    PtqLabError,
    RankError,
    ShapeError,
    StaleTapeError,
    TopologyError,
)
