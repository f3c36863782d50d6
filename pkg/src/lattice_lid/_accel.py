"""Numba dispatch.

Hot kernels are written once as plain Python loops over numpy arrays and
compiled with ``numba.njit`` when available. Setting ``LATTICE_LID_NO_NUMBA=1``
(or running without numba installed) selects the pure-numpy fallbacks instead.
"""

import os

_DISABLED = os.environ.get("LATTICE_LID_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by LATTICE_LID_NO_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(func):
    """Compile ``func`` with numba if enabled, otherwise return it unchanged."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def use_numba():
    return HAVE_NUMBA
