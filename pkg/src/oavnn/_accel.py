"""Backend switch for the hot kernels.

Kernels exist twice: a numba ``@njit`` loop version and a vectorised numpy
version. The numba path is used when numba imports cleanly and the
``OAVNN_DISABLE_NUMBA`` environment variable is unset (or ``0``). The choice
can also be flipped at runtime with :func:`set_backend`, which is what the
benchmark and the cross-backend tests do.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None

_FALSY = ("", "0", "false", "no", "off")
_backend = (
    "numba"
    if NUMBA_AVAILABLE and os.environ.get("OAVNN_DISABLE_NUMBA", "0").strip().lower() in _FALSY
    else "numpy"
)


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` or a no-op decorator when numba is missing."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    previous, _backend = _backend, name
    return previous
