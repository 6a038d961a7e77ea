"""numba switch.

Kernels are compiled with numba when it is importable and the environment
variable ``GLMMLASSO_NUMBA`` is not set to ``0``/``false``/``off``.  Otherwise
every kernel falls back to its pure-numpy twin.  The flag is read once at
import time; :func:`set_numba` flips it at runtime (used by tests and the
benchmark).
"""
import os

_FALSEY = {"0", "false", "off", "no"}

try:
    import numba  # noqa: F401
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    _njit = None

_enabled = HAVE_NUMBA and os.environ.get("GLMMLASSO_NUMBA", "1").strip().lower() not in _FALSEY


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or the identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    if len(args) == 1 and callable(args[0]):
        return _njit(**kwargs)(args[0])
    return _njit(*args, **kwargs)


def numba_enabled():
    return _enabled


def set_numba(flag):
    """Enable or disable the compiled kernels; returns the previous setting."""
    global _enabled
    prev = _enabled
    _enabled = bool(flag) and HAVE_NUMBA
    return prev
