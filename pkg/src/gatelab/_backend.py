"""Kernel selection: the compiled extension when importable, else numpy.

Set ``GATELAB_BACKEND=python`` to force the fallback.
"""
import os

from . import _kernels_py

python_kernels = _kernels_py

compiled_kernels = None
if os.environ.get("GATELAB_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as compiled_kernels  # type: ignore[no-redef]
    except ImportError:
        compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "compiled" if compiled_kernels is not None else "python"
