"""Pick the kernel implementation once, at import.

The compiled extension is preferred; set ``QVDIT_BACKEND=python`` to force
the numpy fallback.
"""
import os

if os.environ.get("QVDIT_BACKEND", "").lower() == "python":
    from . import _kernels_py as kernels

    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as kernels

        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
