"""Backend selection for the hot kernels.

`COUNTEX_BACKEND` picks the implementation: `numba` (compiled, also chosen by
default when numba imports cleanly), `numpy` (pure reference), or `auto`.
Asking for numba explicitly on a machine without it is a configuration error;
`auto` falls back to numpy silently.  Both backends implement identical
arithmetic, so results do not depend on the choice.
"""

from __future__ import annotations

import os

from ..errors import ConfigError
from . import numpy_impl

_CHOICE = os.environ.get("COUNTEX_BACKEND", "auto").strip().lower() or "auto"
if _CHOICE not in ("auto", "numpy", "numba"):
    raise ConfigError(
        f"COUNTEX_BACKEND must be auto, numpy, or numba, got {_CHOICE!r}"
    )

_ACTIVE = "numpy"
_impl = numpy_impl
if _CHOICE in ("auto", "numba"):
    try:
        from . import numba_impl as _numba_impl
    except ImportError:
        if _CHOICE == "numba":
            raise ConfigError("COUNTEX_BACKEND=numba but numba is not importable")
    else:
        _impl = _numba_impl
        _ACTIVE = "numba"


def active_backend() -> str:
    return _ACTIVE


def set_threads(n: int | None) -> None:
    """Bound numba's thread pool; a no-op on the numpy backend."""
    if n is None or _ACTIVE != "numba":
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


render_density = _impl.render_density
solve_assignment = _impl.solve_assignment

__all__ = ["render_density", "solve_assignment", "active_backend", "set_threads"]
