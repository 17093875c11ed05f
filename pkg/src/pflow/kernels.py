"""Backend selection for the hot kernels.

The compiled extension ``pflow._kernels`` is used when it imports; the
numpy implementation in ``pflow._kernels_py`` is the fallback.  Setting
``PFLOW_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("PFLOW_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

GUARD_NORM = _kernels_py.GUARD_NORM

mlp_loss = _impl.mlp_loss
mlp_loss_grad = _impl.mlp_loss_grad
mlp_hvp = _impl.mlp_hvp
mlp_hvp_batch = _impl.mlp_hvp_batch
mlp_hessian = _impl.mlp_hessian
euler_linear = _impl.euler_linear
euler_mlp_gradflow = _impl.euler_mlp_gradflow

__all__ = [
    "BACKEND",
    "GUARD_NORM",
    "mlp_loss",
    "mlp_loss_grad",
    "mlp_hvp",
    "mlp_hvp_batch",
    "mlp_hessian",
    "euler_linear",
    "euler_mlp_gradflow",
]
