"""Active embodiment identification on randomized planar chain robots.

A policy trained with on-policy RL excites a randomized articulated chain
so that a recurrent, morphology-agnostic network can recover the chain's
true joint-level and global physical parameters from the interaction
history. See README.md for the CLI and the acceptance suite.
"""

__version__ = "0.1.0"

import os as _os

# The workload is thousands of small-matrix ops; BLAS thread pools only add
# contention there. Respected only when the user has not set these already,
# and only effective if this package is imported before numpy.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .embodiment import (
    EmbodimentSpec,
    GeneralParams,
    JointParams,
    NormalizedDescriptors,
    RandomizationRanges,
    default_ranges,
    denormalize_descriptors,
    nominal_embodiment,
    normalize_descriptors,
    sample_embodiment,
)
from .sim import ChainBatch, ChainModel, Observation, SimState, build_model
from .tensor import Tensor, no_grad

__all__ = [
    "ChainBatch",
    "ChainModel",
    "EmbodimentSpec",
    "GeneralParams",
    "JointParams",
    "NormalizedDescriptors",
    "Observation",
    "RandomizationRanges",
    "SimState",
    "Tensor",
    "build_model",
    "default_ranges",
    "denormalize_descriptors",
    "no_grad",
    "nominal_embodiment",
    "normalize_descriptors",
    "sample_embodiment",
    "__version__",
]
