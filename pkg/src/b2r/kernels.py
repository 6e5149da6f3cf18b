"""Kernel dispatch: the Cython extension when it is built, numpy otherwise.

Set ``B2R_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("B2R_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

counter_uniforms = _impl.counter_uniforms
suffix_sum = _impl.suffix_sum
budget_paths = _impl.budget_paths
velocity_rollouts = _impl.velocity_rollouts
gelu_fwd = _impl.gelu_fwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
rope_rotate = _impl.rope_rotate
softmax_masked = _impl.softmax_masked
softmax_bwd = _impl.softmax_bwd

__all__ = [
    "BACKEND",
    "counter_uniforms",
    "suffix_sum",
    "budget_paths",
    "velocity_rollouts",
    "gelu_fwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "rope_rotate",
    "softmax_masked",
    "softmax_bwd",
]
