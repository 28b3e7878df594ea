"""Backend selection for the hot kernels.

``DAEGAN_NUMBA=0`` forces the pure-numpy path; anything else (or unset) uses
numba when it imports. ``DAEGAN_THREADS`` caps numba's thread pool (0 = auto).
"""
import os

_flag = os.environ.get("DAEGAN_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

try:
    if not _want_numba:
        raise ImportError
    # the bundled TBB is too old for numba; avoid the probe and its warning
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    numba = None
    HAVE_NUMBA = False


def configure_threads(n=None):
    if n is None:
        n = int(os.environ.get("DAEGAN_THREADS", "0") or 0)
    if HAVE_NUMBA and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when available, identity decorator otherwise."""
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


configure_threads()
