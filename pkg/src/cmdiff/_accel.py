"""Backend selection for the hot numeric kernels.

Set ``CMDIFF_NO_NUMBA=1`` to force the pure-numpy paths. Numba is used
otherwise, when it imports cleanly.
"""

import os

_DISABLED = os.environ.get("CMDIFF_NO_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled via CMDIFF_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # Decorator stub so kernel modules import either way.
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
