"""Numba switch.

Set ``CTSKIT_NO_NUMBA=1`` to run every kernel through its pure-numpy path.
"""
import os

ENV_FLAG = "CTSKIT_NO_NUMBA"

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get(ENV_FLAG, "").strip().lower() in ("", "0", "false", "no")


def njit(func):
    """Compile ``func`` in nopython mode when numba is importable, else return it untouched."""
    if not NUMBA_AVAILABLE:
        return func
    return _numba.njit(cache=True)(func)
