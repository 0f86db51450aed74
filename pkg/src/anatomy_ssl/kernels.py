"""Backend selection for the numeric kernels.

The compiled extension ``anatomy_ssl._kernels`` is preferred; the numpy module
``anatomy_ssl._kernels_py`` is used when it is missing or when the environment
variable ``ANATOMY_SSL_PURE_PYTHON`` is set to a non-empty value other than ``0``.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ANATOMY_SSL_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

histogram256 = _impl.histogram256
otsu_scan = _impl.otsu_scan
sinkhorn_balance = _impl.sinkhorn_balance
patch_means = _impl.patch_means
paste_add = _impl.paste_add
auc_rank = _impl.auc_rank


def available_backends():
    """Return a mapping ``name -> module`` of every importable backend."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        pass
    else:
        out["compiled"] = compiled
    return out
