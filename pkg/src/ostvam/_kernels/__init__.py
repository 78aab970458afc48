"""Hot numerical kernels with a compiled core and a numpy fallback.

The compiled extension is used when importable; set ``OSTVAM_PURE_PYTHON=1``
to force the numpy implementation.  ``BACKEND`` names the active choice.
"""
import os

from . import _pykernels

if os.environ.get("OSTVAM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

radon = _impl.radon
backproject = _impl.backproject
deposit_rays = _impl.deposit_rays
integrate_rays = _impl.integrate_rays

__all__ = ["BACKEND", "radon", "backproject", "deposit_rays", "integrate_rays"]
