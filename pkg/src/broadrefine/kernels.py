"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Setting ``BROADREFINE_PURE_PYTHON=1`` forces the
fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS: dict[str, ModuleType] = {"python": _fallback}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

if os.environ.get("BROADREFINE_PURE_PYTHON", "").strip() not in ("", "0") or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

conjunctive_filter = BACKENDS[BACKEND].conjunctive_filter


def get_backend(name: str) -> ModuleType:
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available; have {sorted(BACKENDS)}") from None
