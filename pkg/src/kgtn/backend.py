"""Kernel backend selection.

The gated-update cell has two interchangeable implementations:

* ``kgtn._gru_ext`` — Cython + BLAS, built by setup.py (may be absent);
* ``kgtn._kernels_py`` — plain numpy.

The compiled one is picked at import when available.  Set ``KGTN_NO_EXT=1``
to force the numpy fallback.  ``use()`` switches at runtime (used by the
benchmark and the cross-backend tests).
"""

import os

from . import _kernels_py

_BACKENDS = {"numpy": _kernels_py}

try:  # pragma: no cover - depends on whether the extension was built
    if os.environ.get("KGTN_NO_EXT", "") not in ("1", "true", "yes"):
        from . import _gru_ext

        _BACKENDS["ext"] = _gru_ext
except ImportError:  # pragma: no cover
    pass

_active = _BACKENDS.get("ext", _kernels_py)


def available():
    """Names of importable backends."""
    return sorted(_BACKENDS)


def active_name():
    return _active.NAME


def use(name):
    """Select the active backend by name ('ext' or 'numpy')."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available()}")
    _active = _BACKENDS[name]


def get(name):
    """Return a backend module without activating it."""
    return _BACKENDS[name]


def gru_cell_forward(a, h, wz, uz, wr, ur, w, u):
    return _active.gru_cell_forward(a, h, wz, uz, wr, ur, w, u)


def gru_cell_backward(g, a, h, wz, uz, wr, ur, w, u, cache):
    return _active.gru_cell_backward(g, a, h, wz, uz, wr, ur, w, u, cache)
