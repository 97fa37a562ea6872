"""Joint space-time video super-resolution on cuboid slices.

A low-resolution, low-frame-rate video is treated as a (time, height, width)
cuboid, sliced along all three axes, enhanced per slice by shared-weight
residual branches, recombined by 3-D reconstruction blocks, and polished by
per-frame and cross-frame enhancement stages. The package bundles the
float64 autograd engine, the video container, training, quality metrics, and
a command-line front end.
"""

import os

# Single-threaded BLAS is both the determinism contract (bit-identical
# reruns) and, for this workload's small GEMMs, faster than threading.
# Honored only if numpy is not already loaded; pre-set the var to override.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from . import _memory

_memory.tune_malloc()

from .errors import ContractError, FormatError, NumericalError
from .tensor import (
    ComputationTape,
    Tensor,
    backward,
    grad_check,
    no_grad,
)

__all__ = [
    "ContractError",
    "FormatError",
    "NumericalError",
    "ComputationTape",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
]

__version__ = "0.1.0"
