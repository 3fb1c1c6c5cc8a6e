"""Numba switch.

Hot kernels are compiled with ``numba.njit`` unless ``AUGSHIELD_NUMBA=0`` is set
in the environment or numba cannot be imported. The flag is read once, at import.
"""

import os

_flag = os.environ.get("AUGSHIELD_NUMBA", "1").strip().lower()
_wanted = _flag not in ("0", "false", "no", "off")

try:
    if not _wanted:
        raise ImportError("disabled by AUGSHIELD_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(f):
        return f

    return wrapper
