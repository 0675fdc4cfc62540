"""Backend selection for the hot kernels.

Each kernel in :mod:`pmpnet.kernels` exists twice: a loop version compiled
with numba and a vectorised pure-numpy version.  The numba path is used when
numba imports cleanly and ``PMPNET_DISABLE_NUMBA`` is unset (or ``0``).
"""

import os

_flag = os.environ.get("PMPNET_DISABLE_NUMBA", "0").strip().lower()
DISABLED_BY_ENV = _flag not in ("", "0", "false", "no")

try:
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not DISABLED_BY_ENV


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or an identity decorator without numba."""
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
