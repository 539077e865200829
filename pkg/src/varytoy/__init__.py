"""Desk-scale vision-language model with a reinforced vision vocabulary."""

import os as _os

# Thread count must reach BLAS before numpy is imported.
_threads = _os.environ.get("VARYTOY_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
