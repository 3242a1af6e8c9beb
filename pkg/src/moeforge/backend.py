"""Kernel backend selection.

Two interchangeable kernel implementations exist:

* ``moeforge._kernels_c`` — Cython extension (fast path)
* ``moeforge._kernels_py`` — pure Python (always available)

Both produce byte-identical results by construction; selection is purely
a speed decision. The compiled backend is used when importable. Set
MOEFORGE_BACKEND=python or MOEFORGE_BACKEND=c to force one (forcing "c"
raises if the extension is missing).

Call sites access kernels as ``backend.kernels.<fn>`` so tests can swap
the active backend at runtime via use()/temporary().
"""

import contextlib
import os

from . import _kernels_py
from .errors import ConfigError

try:
    from . import _kernels_c
except ImportError:
    _kernels_c = None


def _select(name: str):
    if name == "python":
        return _kernels_py
    if name == "c":
        if _kernels_c is None:
            raise ConfigError("compiled kernel backend requested but not built")
        return _kernels_c
    if name == "auto":
        return _kernels_c if _kernels_c is not None else _kernels_py
    raise ConfigError(f"unknown backend {name!r} (expected 'c', 'python' or 'auto')")


kernels = _select(os.environ.get("MOEFORGE_BACKEND", "auto"))


def active_backend() -> str:
    """Name of the backend currently in use."""
    return "c" if kernels is _kernels_c else "python"


def available_backends() -> tuple[str, ...]:
    return ("c", "python") if _kernels_c is not None else ("python",)


def use(name: str) -> None:
    """Switch the active backend ('c', 'python' or 'auto')."""
    global kernels
    kernels = _select(name)


@contextlib.contextmanager
def temporary(name: str):
    """Run a block under a specific backend, restoring the previous one after."""
    global kernels
    prev = kernels
    kernels = _select(name)
    try:
        yield kernels
    finally:
        kernels = prev
