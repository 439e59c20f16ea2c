"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy versions in ``_kernels_py`` are used. Setting ``FDLORA_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active implementation.
"""
import os

from fdlora import _kernels_py

_compiled = None
if not os.environ.get("FDLORA_PURE_PYTHON"):
    try:
        from fdlora import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"

matmul = _impl.matmul
softmax_xent = _impl.softmax_xent
adamw_update = _impl.adamw_update
nesterov_update = _impl.nesterov_update


def available_backends():
    """Map backend name -> kernel module for every importable backend."""
    found = {"python": _kernels_py}
    try:
        from fdlora import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
