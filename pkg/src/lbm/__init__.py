"""Liouville Brownian motion on a window of the plane.

The pipeline: band-decomposed massive Gaussian free field (:mod:`lbm.gmc`)
built from the kernels in :mod:`lbm.kernels`, regularized chaos measure,
its potentials (:mod:`lbm.potential`), and the additive functional and
time-changed Brownian path (:mod:`lbm.pcaf`).  :mod:`lbm.cli` runs it all
from a config file.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ConvergenceError, EmbeddingError, HorizonError, LBMError,
                     NestingError, ResolutionError, SingularityError, WindowExitError)
from .kernels import CutoffSequence, KernelConfig
from .gmc import ChaosMeasure, FieldStack, GridSpec, build_measure, build_stack
from .pcaf import lbm_path, pcaf_integrate, simulate_bm

__all__ = [
    "__version__", "LBMError", "ConfigError", "ConvergenceError", "EmbeddingError",
    "HorizonError", "NestingError", "ResolutionError", "SingularityError", "WindowExitError",
    "KernelConfig", "CutoffSequence", "GridSpec", "FieldStack", "ChaosMeasure",
    "build_stack", "build_measure", "simulate_bm", "pcaf_integrate", "lbm_path",
]
