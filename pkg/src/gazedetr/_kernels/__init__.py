"""Hot kernels with a compiled (Cython) core and a pure-Python fallback.

The compiled module is used when it has been built and
``GAZEDETR_PURE_PYTHON`` is not set to a truthy value.
"""

import os

from . import _pykernels as python_backend

try:
    if os.environ.get("GAZEDETR_PURE_PYTHON", "").lower() in ("1", "true", "yes"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "cython" if compiled_backend is not None else "python"

im2col = backend.im2col
col2im = backend.col2im
solve_assignment = backend.solve_assignment

__all__ = ["im2col", "col2im", "solve_assignment", "BACKEND_NAME", "python_backend", "compiled_backend"]
