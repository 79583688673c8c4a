"""Backend selection for the hot kernels.

Kernels are written once as plain Python loops over numpy arrays.  When numba
is importable and ``TRAVERSE_P2_BACKEND`` is not ``numpy``, they are compiled
with ``numba.njit``; otherwise callers use the vectorized numpy versions.
"""

import os
import warnings

BACKEND_ENV = "TRAVERSE_P2_BACKEND"
THREADS_ENV = "TRAVERSE_P2_THREADS"

try:
    import numba

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the TBB probe warns on older TBB builds; prefer OpenMP when present
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def _requested_backend():
    value = os.environ.get(BACKEND_ENV, "auto").strip().lower()
    if value not in ("auto", "numba", "numpy"):
        warnings.warn(f"{BACKEND_ENV}={value!r} not understood, using 'auto'")
        value = "auto"
    if value == "numba" and not HAVE_NUMBA:
        warnings.warn(f"{BACKEND_ENV}=numba but numba is not installed; using numpy")
        return "numpy"
    if value == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    return value


BACKEND = _requested_backend()
USE_NUMBA = BACKEND == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity decorator otherwise.

    The decorated function is always compiled if numba exists, independent of
    ``BACKEND``, so the benchmark can compare both paths in one process.
    """
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda fn: fn


prange = numba.prange if HAVE_NUMBA else range


def set_threads(n=0):
    """Set the kernel thread count. 0 means: env var, then all cores."""
    if n is None or n == 0:
        n = int(os.environ.get(THREADS_ENV, "0") or 0)
    if not HAVE_NUMBA:
        return 1
    if n <= 0:
        n = numba.config.NUMBA_NUM_THREADS
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n
