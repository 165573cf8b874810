"""Optional numba acceleration.

Set ``EQDDP_DISABLE_NUMBA=1`` before import to run every kernel as plain
numpy code. Kernels are written so that both paths execute the same source.
"""
import os
import warnings

_FLAG = os.environ.get("EQDDP_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    warnings.filterwarnings("ignore", category=numba.NumbaPerformanceWarning)
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def kernel(fn):
    """Compile ``fn`` with numba when enabled, otherwise return it unchanged."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
