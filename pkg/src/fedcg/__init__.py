"""Desk-scale federated learning simulator with split networks, local
conditional GANs, data-free server distillation, and a gradient-inversion
attack harness."""

import os as _os

# The engine's matrices are small; BLAS thread fan-out costs more than it
# buys and would fight the client-level worker threads. Pin to one thread
# before numpy loads, fall back to threadpoolctl when it already has.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")
_os.environ.setdefault("MKL_NUM_THREADS", "1")
import sys as _sys

if "numpy" in _sys.modules:
    try:
        import threadpoolctl as _threadpoolctl

        _BLAS_LIMITER = _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass

from .tensor import (  # noqa: F401
    DomainError,
    GraphError,
    ShapeError,
    Tensor,
    no_grad,
    set_default_dtype,
)

__version__ = "0.1.0"
