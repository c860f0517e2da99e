"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_pykernels`` are used. Set
``DUALSTREAM_KERNELS=python`` to force the fallback, or call
:func:`use_backend` at runtime (the benchmark does this).

Callers must look kernels up through this module (``kernels.softmax_rows``),
not import the functions directly, so that switching takes effect.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNEL_NAMES = (
    "softmax_rows",
    "softmax_rows_backward",
    "attention_forward",
    "attention_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "lcs_length",
)

BACKEND = None


def available_backends():
    return ["compiled", "python"] if _ckernels is not None else ["python"]


def use_backend(name):
    """Bind the module-level kernel functions to ``"compiled"`` or ``"python"``."""
    global BACKEND
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; reinstall with Cython available")
        impl = _ckernels
    elif name == "python":
        impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    for fn in KERNEL_NAMES:
        globals()[fn] = getattr(impl, fn)
    BACKEND = name


def backend_module(name):
    return _ckernels if name == "compiled" else _pykernels


_requested = os.environ.get("DUALSTREAM_KERNELS", "").strip().lower()
if _requested == "python" or _ckernels is None:
    use_backend("python")
else:
    use_backend("compiled")
