"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension ``_ckernels`` is used when it imports cleanly;
otherwise the pure-numpy ``_fallback`` module is used.  Setting the
environment variable ``MCTFORMER_KERNELS=python`` forces the fallback.
Both backends expose the same functions with the same float64 semantics:

softmax_forward, softmax_backward
    Row-wise softmax over a contiguous 2-D array.
layernorm_forward, layernorm_backward
    Row-wise layer normalization with affine parameters.
gelu_forward, gelu_backward
    Tanh-approximation GELU over a flat array.
conv3x3_forward, conv3x3_backward
    Stride-1, zero-pad-1 3x3 convolution on (B, N, N, D) channel-last maps.
confusion_counts
    Label confusion matrix over flat integer arrays.
"""

import os

from . import _fallback

_NAMES = (
    "softmax_forward",
    "softmax_backward",
    "layernorm_forward",
    "layernorm_backward",
    "gelu_forward",
    "gelu_backward",
    "conv3x3_forward",
    "conv3x3_backward",
    "confusion_counts",
)

fallback = _fallback
compiled = None
if os.environ.get("MCTFORMER_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

BACKEND = "cython" if compiled is not None else "python"
_active = compiled if compiled is not None else _fallback


def use_backend(name):
    """Switch the active backend to ``"cython"`` or ``"python"``."""
    global _active, BACKEND
    if name == "cython":
        if compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = compiled
    elif name == "python":
        _active = _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def active():
    """Module currently serving kernel calls."""
    return _active
