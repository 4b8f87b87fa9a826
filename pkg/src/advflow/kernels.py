"""Backend selection for the dense-layer kernels.

The compiled extension is preferred; set ``ADVFLOW_PURE_PYTHON=1`` to force
the numpy fallback (useful for debugging and for the benchmark).
"""
import os

from . import _kernels_py

IDENTITY = _kernels_py.IDENTITY
SILU = _kernels_py.SILU
TANH = _kernels_py.TANH

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("ADVFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward
