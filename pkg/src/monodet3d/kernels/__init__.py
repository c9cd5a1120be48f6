"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is picked once at import time from the environment variable
``MONODET3D_KERNELS``:

* ``auto`` (default): use numba if it imports, else fall back to numpy
* ``numba``: require numba, fail loudly if unavailable
* ``numpy``: force the pure-numpy implementations

Both backends implement the same functions with identical semantics; they
may differ in the last bits of floating-point results because summation
order differs. Within one backend every kernel is deterministic.
"""

import os

from . import numpy_impl

_ENV_VAR = "MONODET3D_KERNELS"
_choice = os.environ.get(_ENV_VAR, "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"{_ENV_VAR} must be auto, numba or numpy, got {_choice!r}")

_impl = numpy_impl
_backend = "numpy"
if _choice in ("auto", "numba"):
    try:
        from . import numba_impl

        _impl = numba_impl
        _backend = "numba"
    except ImportError:
        if _choice == "numba":
            raise


def backend() -> str:
    """Name of the active backend: 'numba' or 'numpy'."""
    return _backend


conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
jv_assign = _impl.jv_assign
fill_convex_polygon = _impl.fill_convex_polygon
