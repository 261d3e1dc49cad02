"""Kernel backend selection.

The compiled extension ``_kernels_c`` is used when it imports; otherwise the
numpy twin ``_kernels_py`` is used. Set ``IBTL_PURE_PYTHON=1`` to force the
fallback. Both backends agree to rounding, not bit-for-bit.
"""

import os

from . import _kernels_py

if os.environ.get("IBTL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels_c as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

softmax_linear_loss_grad = _impl.softmax_linear_loss_grad
softmax_linear_mean_grad = _impl.softmax_linear_mean_grad
softmax_linear_hvp = _impl.softmax_linear_hvp
lissa_softmax_linear = _impl.lissa_softmax_linear
adam_step = _impl.adam_step


def backends():
    """All importable backends by name, for benchmarks and parity tests."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels_c

        out["cython"] = _kernels_c
    except ImportError:
        pass
    return out
