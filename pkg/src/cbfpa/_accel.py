"""Numba switch.

Hot kernels are decorated with :func:`njit`.  Setting ``CBFPA_NUMBA=0`` in the
environment (before import) turns the decorator into a no-op so every kernel
runs as plain numpy/python code.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

ENABLE_NUMBA = numba is not None and os.environ.get("CBFPA_NUMBA", "1") != "0"
CACHE_NUMBA = True


def njit(func):
    if ENABLE_NUMBA:
        return numba.njit(cache=CACHE_NUMBA)(func)
    return func
