"""Query-conditioned music source separation on a small numpy autodiff engine."""

import os as _os

# QSEP_THREADS bounds BLAS worker threads; it must be applied before numpy loads
_threads = _os.environ.get("QSEP_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
