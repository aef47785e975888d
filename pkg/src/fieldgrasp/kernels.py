"""Hot-kernel dispatch.

Uses the compiled ``_kernels`` extension when it is importable, otherwise the
numpy fallback. Set ``FIELDGRASP_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FIELDGRASP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

scatter_add_rows = _impl.scatter_add_rows
radius_pairs = _impl.radius_pairs
kendall_counts = _impl.kendall_counts

__all__ = ["BACKEND", "scatter_add_rows", "radius_pairs", "kendall_counts"]
