"""Optional numba acceleration for the hot numeric kernels.

Compilation is on by default.  Set DRIVETRANSFER_NUMBA=0 (or "off"/"false")
to run every kernel as plain Python/numpy; results are the same, only slower.
The flag is read once at import time.
"""
from __future__ import annotations

import os

_FALSE_VALUES = ("0", "off", "false", "no")


def _numba_requested() -> bool:
    return os.environ.get("DRIVETRANSFER_NUMBA", "1").strip().lower() not in _FALSE_VALUES


NUMBA_ENABLED = False

if _numba_requested():
    try:
        from numba import njit as _numba_njit

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False

if NUMBA_ENABLED:

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        if args and callable(args[0]) and len(args) == 1:
            return _numba_njit(cache=kwargs["cache"])(args[0])
        return _numba_njit(*args, **kwargs)

else:

    def njit(*args, **kwargs):  # noqa: ARG001 - mirrors numba's signature
        if args and callable(args[0]) and len(args) == 1:
            return args[0]

        def passthrough(func):
            return func

        return passthrough
