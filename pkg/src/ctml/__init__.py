"""Cross-task mutual learning for sparse, limited and low-dose CT."""

import os as _os

# CTML_THREADS caps BLAS/OpenMP threads; it must be applied before numpy loads
_threads = _os.environ.get("CTML_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
