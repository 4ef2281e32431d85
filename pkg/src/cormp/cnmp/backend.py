"""Select the compiled CNMP kernels when available, else the numpy fallback.

Set ``CORMP_BACKEND=python`` to force the fallback.
"""
import os

from . import _fallback

python_kernels = _fallback

if os.environ.get("CORMP_BACKEND", "").lower() == "python":
    kernels, NAME = _fallback, "python"
else:
    try:
        from . import _kernel as kernels
        NAME = "cython"
    except ImportError:
        kernels, NAME = _fallback, "python"


def compiled_kernels():
    """Return the compiled module or ``None`` if it is not built."""
    try:
        from . import _kernel
    except ImportError:
        return None
    return _kernel
