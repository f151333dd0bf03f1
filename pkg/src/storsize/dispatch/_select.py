"""Kernel selection: compiled extension when importable, pure Python otherwise.

Set ``STORSIZE_PURE=1`` in the environment to force the pure-Python kernel
(used by the benchmark and for debugging).
"""

from __future__ import annotations

import os

from . import _pykernel

if os.environ.get("STORSIZE_PURE"):
    _impl = _pykernel
    COMPILED = False
else:
    try:
        from . import _kernel as _impl  # type: ignore[attr-defined]

        COMPILED = True
    except ImportError:
        _impl = _pykernel
        COMPILED = False


def kernel_name() -> str:
    return "compiled" if COMPILED else "pure-python"


def kernel_run_year(*args, **kwargs):
    return _impl.run_year(*args, **kwargs)
