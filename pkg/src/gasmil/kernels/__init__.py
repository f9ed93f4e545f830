"""Max-Min selection kernels.

The compiled extension ``_maxmin`` is used when it was built; otherwise the
numpy implementation in ``_maxmin_py`` is used.  Setting the environment
variable ``GASMIL_PURE_PYTHON=1`` forces the fallback.  ``BACKEND`` names the
implementation that was picked at import.
"""

import os

from . import _maxmin_py as python_backend

compiled_backend = None
if os.environ.get("GASMIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _maxmin as compiled_backend
    except ImportError:
        compiled_backend = None

if compiled_backend is not None:
    maxmin_select = compiled_backend.maxmin_select
    maxmin_scatter = compiled_backend.maxmin_scatter
    BACKEND = "compiled"
else:
    maxmin_select = python_backend.maxmin_select
    maxmin_scatter = python_backend.maxmin_scatter
    BACKEND = "python"

__all__ = ["BACKEND", "maxmin_select", "maxmin_scatter", "python_backend", "compiled_backend"]
