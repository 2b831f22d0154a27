"""Select the compiled kernels when available, else the pure-Python ones.

Set ``CASCADE_SPK_PURE=1`` to force the fallback.
"""

import os

from . import _fallback

fallback = _fallback

if os.environ.get("CASCADE_SPK_PURE", "") not in ("", "0"):
    compiled = None
else:
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

kernels = compiled if compiled is not None else fallback
NAME = "cython" if compiled is not None else "python"

jacobi_eigh = kernels.jacobi_eigh
lloyd = kernels.lloyd
