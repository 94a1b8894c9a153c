"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over.  ``PIF_BACKEND=python`` forces the fallback.
"""

import os
import warnings

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available():
    return sorted(_BACKENDS)


def _default():
    want = os.environ.get("PIF_BACKEND", "").strip().lower()
    if want:
        if want not in _BACKENDS:
            warnings.warn(f"PIF_BACKEND={want!r} unavailable; using the default", RuntimeWarning)
        else:
            return _BACKENDS[want]
    return _BACKENDS.get("cython", _pykernels)


ACTIVE = _default()


def get(name=None):
    """Kernel module by name; ``None`` gives the import-time default."""
    if name is None:
        return ACTIVE
    if hasattr(name, "network_sweep"):
        return name
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; have {available()}") from None
