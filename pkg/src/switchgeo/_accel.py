"""Numba dispatch switch.

Hot loops have two implementations: an explicit-loop kernel compiled with
``numba.njit`` and a vectorized numpy fallback. Set ``SWITCHGEO_NUMBA=0`` in
the environment (before import) to force the numpy paths.
"""
import os

_FLAG = os.environ.get("SWITCHGEO_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op when numba is absent."""
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
