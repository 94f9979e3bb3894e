"""Learned time-integrated coarse-grained molecular dynamics.

Pipeline: cluster bond graphs into beads, train a stochastic message-passing
stepper on short reference trajectories, optionally refine each predicted
frame with an annealed-Langevin score model, and roll out long horizons whose
distributional properties track the reference simulator at a fraction of its
cost.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, FileFormatError, NumericalError,
                     PipelineError, ShapeError)

__all__ = [
    "ConfigError", "FileFormatError", "NumericalError", "PipelineError",
    "ShapeError", "__version__",
]
