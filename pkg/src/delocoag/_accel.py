"""Selection between numba-compiled kernels and the pure numpy/Python path.

Set ``DELOCOAG_DISABLE_NUMBA=1`` in the environment before importing the
package to force the fallback implementations.
"""
import os

_FLAG = os.environ.get("DELOCOAG_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it unchanged.

    The undecorated function stays reachable as ``fn.py_func`` in both cases so
    callers can run the interpreted version explicitly.
    """
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    fn.py_func = fn
    return fn
