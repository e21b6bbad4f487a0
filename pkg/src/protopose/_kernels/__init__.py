"""Kernel backend selection.

The compiled Cython core is preferred when it built successfully; the
pure-numpy fallback is a drop-in replacement. PROTOPOSE_KERNELS=python|compiled
forces a backend (the latter raises if the extension is missing).
"""

from __future__ import annotations

import os

_choice = os.environ.get("PROTOPOSE_KERNELS", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise RuntimeError(f"PROTOPOSE_KERNELS must be auto, compiled or python, got {_choice!r}")

if _choice == "python":
    from . import _fallback as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        from . import _fallback as _impl

        BACKEND = "python"

encode_gaussians = _impl.encode_gaussians
decode_peaks = _impl.decode_peaks
sinkhorn = _impl.sinkhorn

__all__ = ["BACKEND", "encode_gaussians", "decode_peaks", "sinkhorn"]
