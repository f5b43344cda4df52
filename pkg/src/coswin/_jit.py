"""Numba switch.

``COSWIN_NUMBA=0`` (or numba missing) routes every kernel through its
pure-numpy twin. The flag is read once at import time; both variants stay
importable so the benchmark can compare them in one process.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("COSWIN_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(func=None, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        if func is not None:
            return numba.njit(**kwargs)(func)
        return numba.njit(**kwargs)
    if func is not None:
        return func
    return lambda f: f


def worker_count() -> int:
    """Worker cap for data generation and tiled inference (``COSWIN_THREADS``)."""
    raw = os.environ.get("COSWIN_THREADS")
    if raw:
        return max(1, int(raw))
    return max(1, os.cpu_count() or 1)
