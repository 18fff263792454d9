"""Numba switch for the numeric kernels.

Set ``DOBKIT_JIT=0`` before import to run every kernel as plain numpy.
"""
import functools
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

JIT_ENABLED = numba is not None and os.environ.get("DOBKIT_JIT", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def kernel(fn):
    """Compile ``fn`` with ``numba.njit`` when enabled, otherwise wrap it for numpy.

    The undecorated function stays reachable as ``fn.py_func`` in both modes.
    Compiled code ignores numpy's floating-point error state, so the fallback
    runs under a neutral ``np.errstate`` too; kernels test for non-finite
    values explicitly.
    """
    if JIT_ENABLED:
        return numba.njit(cache=True, nogil=True)(fn)

    @functools.wraps(fn)
    def run(*args):
        with np.errstate(all="ignore"):
            return fn(*args)

    run.py_func = fn
    return run
