"""Vanilla and Mixture-of-Experts BERT encoders with transfer capability distillation."""

import os as _os

# Multi-threaded BLAS reductions are not bit-reproducible across thread counts.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
