"""Select the compiled kernels when available, else the numpy fallback.

Set ``MOE_SCALING_PURE=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("MOE_SCALING_PURE", "") not in ("", "0"):
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"

predict = kernels.predict
objective_grad = kernels.objective_grad
