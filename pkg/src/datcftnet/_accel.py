"""Numba switch for the DSP kernels.

Set ``DATCFTNET_DISABLE_NUMBA=1`` to force the pure-numpy code paths.
"""
import os

DISABLE_NUMBA = os.environ.get("DATCFTNET_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not DISABLE_NUMBA


def njit(func):
    """``numba.njit(cache=True)`` when numba is available, identity otherwise."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)
