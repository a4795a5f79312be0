"""Optional numba acceleration.

Kernels are written once as plain loops and compiled with ``numba.njit`` when
numba is importable and ``ATO_DISABLE_NUMBA`` is unset (or ``0``).  Each
accelerated kernel keeps a pure-numpy twin; :func:`pick` chooses between them.
"""
import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _flag_disabled():
    value = os.environ.get("ATO_DISABLE_NUMBA", "").strip().lower()
    return value not in ("", "0", "false", "no")


USE_NUMBA = HAS_NUMBA and not _flag_disabled()


def njit(fn):
    """Compile ``fn`` in nopython mode if numba is available, else return it."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def pick(jitted, fallback):
    """Return the jitted kernel when acceleration is enabled."""
    return jitted if USE_NUMBA else fallback
