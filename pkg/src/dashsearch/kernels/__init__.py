"""Gated delta scan kernels: compiled core with a pure-numpy fallback.

The backend is picked once at import time. Set DASH_SCAN_BACKEND to
"cython" or "python" to force a choice ("cython" raises if the compiled
module is missing); the default "auto" prefers the compiled kernel.
"""

from __future__ import annotations

import os

from . import scan_ref

_requested = os.environ.get("DASH_SCAN_BACKEND", "auto").lower()
if _requested not in ("auto", "cython", "python"):
    raise ValueError(f"DASH_SCAN_BACKEND={_requested!r} (want auto, cython, or python)")

_compiled = None
if _requested in ("auto", "cython"):
    try:
        from . import _scan as _compiled
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "DASH_SCAN_BACKEND=cython but the compiled kernel is not built; "
                "reinstall the package or use DASH_SCAN_BACKEND=python"
            ) from None

_impl = _compiled if _compiled is not None else scan_ref
BACKEND = "cython" if _compiled is not None else "python"


def scan_fwd(q, k, v, g, b):
    return _impl.scan_fwd(q, k, v, g, b)


def scan_bwd(q, k, v, g, b, states, delta, dy):
    return _impl.scan_bwd(q, k, v, g, b, states, delta, dy)


def available_backends() -> dict[str, object]:
    """Map backend name to its module; used by tests and the benchmark."""
    out: dict[str, object] = {"python": scan_ref}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
