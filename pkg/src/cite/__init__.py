"""Conditional image-text embedding networks for phrase grounding.

A region-phrase scoring model built from two feature branches, a joint
Hadamard representation, K conditional embedding subspaces fused by
per-phrase concept weights, and a final affine classifier; plus the
training, pair-mining, assignment, and localization-evaluation pipeline
around it.

Environment variables
---------------------
CITE_THREADS
    Caps internal parallelism of the numeric backends (BLAS thread pools
    and, when numba is active, its thread count). 0 or unset = automatic.
CITE_NUMBA
    Set to ``0`` to force the pure-numpy kernel path even when numba is
    installed. Default: use numba when importable.
"""

import os as _os

# Thread caps must land in the environment before numpy (and its BLAS)
# loads, which is why this sits above every other import.
_threads = _os.environ.get("CITE_THREADS", "").strip()
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import errors  # noqa: E402
from .errors import (  # noqa: E402
    CheckpointError,
    CiteError,
    ConfigError,
    DataError,
    DimensionError,
    ModeError,
    NumericError,
    StateError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "CiteError",
    "ConfigError",
    "ValidationError",
    "DimensionError",
    "DataError",
    "CheckpointError",
    "NumericError",
    "ModeError",
    "StateError",
    "__version__",
]
