"""Numba switch.

Kernels in :mod:`seaice.kernels` are written twice: a loop version compiled
with numba and a vectorized numpy version. ``SEAICE_DISABLE_NUMBA=1`` (or a
missing numba install) selects the numpy path at import time.
"""
import os

_FLAG = os.environ.get("SEAICE_DISABLE_NUMBA", "").strip().lower()

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or an identity decorator without numba."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return _njit(*args, **kwargs)
