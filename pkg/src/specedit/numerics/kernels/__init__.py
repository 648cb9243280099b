"""Backend selection for the convolution hot kernels.

The compiled Cython extension is used when it imported successfully; the
numpy im2col fallback is always available. Set SPECEDIT_KERNELS=python to
force the fallback, SPECEDIT_KERNELS=compiled to fail loudly if the
extension is missing. Both backends satisfy the same contracts; they may
differ in float rounding because they accumulate in different orders.
"""

import os

from . import fallback

_BACKEND = "python"
conv3x3_forward = fallback.conv3x3_forward
conv3x3_backward = fallback.conv3x3_backward
silu_forward = fallback.silu_forward
silu_backward = fallback.silu_backward
layernorm_forward = fallback.layernorm_forward
layernorm_backward = fallback.layernorm_backward

_choice = os.environ.get("SPECEDIT_KERNELS", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(f"SPECEDIT_KERNELS must be auto|compiled|python, got {_choice!r}")
if _choice in ("auto", "compiled"):
    try:
        from . import compiled
        conv3x3_forward = compiled.conv3x3_forward
        conv3x3_backward = compiled.conv3x3_backward
        layernorm_forward = compiled.layernorm_forward
        layernorm_backward = compiled.layernorm_backward
        _BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise


def backend():
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return _BACKEND
