"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. ``REGIMEHEDGE_BACKEND=python`` forces the fallback.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["compiled"] = _kernels_c

DEFAULT = os.environ.get("REGIMEHEDGE_BACKEND") or ("compiled" if _kernels_c is not None else "python")
if DEFAULT not in _BACKENDS:
    raise ImportError(f"kernel backend {DEFAULT!r} is not available")


def available() -> list[str]:
    return sorted(_BACKENDS)


def get(name: str, backend: str | None = None):
    """Return kernel ``name`` from ``backend`` (default: the import-time choice)."""
    try:
        module = _BACKENDS[backend or DEFAULT]
    except KeyError:
        raise ValueError(f"unknown or unavailable kernel backend {backend!r}") from None
    return getattr(module, name)
