"""dosmct: ultra-sparse-view CT reconstruction toolkit.

Matrix-free fan/parallel-beam projection with an exact adjoint, classical
baselines (FBP, SIRT, FISTA-TV), a small score-model stack (noise schedule,
analytic mixture scores, denoising-score-matching training) and the
multi-channel data-iterative score sampler built on top of them.
"""

__version__ = "0.1.0"

import os as _os

# The bundled TBB is too old for numba and only produces a warning; pin the
# OpenMP layer before numba initializes. DOSMCT_THREADS (see cli) caps workers.
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .grids import FanBeamGeometry, Image, ImageGrid, Sinogram, SirtWeights
from .projector import back_project, forward_project, sirt_weights

__all__ = [
    "__version__",
    "FanBeamGeometry",
    "Image",
    "ImageGrid",
    "Sinogram",
    "SirtWeights",
    "forward_project",
    "back_project",
    "sirt_weights",
]
