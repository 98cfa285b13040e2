"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``CCLOC_DISABLE_NUMBA`` is unset (or ``0``). :func:`use_backend`
switches at runtime, which the tests and the benchmark rely on.
"""
import os
from contextlib import contextmanager

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

_BACKENDS = {"numpy": _numpy}
if _numba is not None:
    _BACKENDS["numba"] = _numba


def _default_backend():
    disabled = os.environ.get("CCLOC_DISABLE_NUMBA", "").strip().lower()
    if _numba is None or disabled not in ("", "0", "false", "no"):
        return "numpy"
    return "numba"


_active = _BACKENDS[_default_backend()]


def backend():
    """Name of the active kernel backend."""
    return "numba" if _active is _numba else "numpy"


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _active = _BACKENDS[name]


@contextmanager
def use_backend(name):
    previous = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def conv1d_forward(x, w, b):
    return _active.conv1d_forward(x, w, b)


def conv1d_backward(x, w, gout):
    return _active.conv1d_backward(x, w, gout)


def maxpool1d_forward(x, width):
    return _active.maxpool1d_forward(x, width)


def maxpool1d_backward(gout, idx, lin):
    return _active.maxpool1d_backward(gout, idx, lin)


def rank_penalty(rank_a, rank_b, k):
    return _active.rank_penalty(rank_a, rank_b, k)
