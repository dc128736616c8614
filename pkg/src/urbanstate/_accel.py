"""Backend selection for the numeric kernels.

Kernels are written once as plain Python loops and compiled with numba when
it is available. Setting ``URBANSTATE_BACKEND=numpy`` (or ``URBANSTATE_NO_NUMBA=1``)
routes every kernel call to its vectorised numpy twin instead.
"""
from __future__ import annotations

import os

__all__ = ["njit", "use_numba", "backend_name"]


def _env_disabled() -> bool:
    if os.environ.get("URBANSTATE_NO_NUMBA", "").strip() not in ("", "0"):
        return True
    return os.environ.get("URBANSTATE_BACKEND", "numba").strip().lower() == "numpy"


try:
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False


def use_numba() -> bool:
    """True when kernels should dispatch to the compiled implementation."""
    return HAVE_NUMBA and not _env_disabled()


def backend_name() -> str:
    return "numba" if use_numba() else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; identity decorator when numba is missing."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
