"""Non-rigid multi-view stereo from a few wide-baseline images."""

__version__ = "0.1.0"

import numba as _numba

# the TBB layer is probed first by default and warns when the installed
# version is too old; OpenMP and the work queue are both fine here
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
