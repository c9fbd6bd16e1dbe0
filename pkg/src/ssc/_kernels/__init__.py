"""
Element-patch kernels for the s-Laplace energy.

The compiled extension is used when it has been built; otherwise the numpy
implementation is selected. Set ``SSC_PURE_PYTHON=1`` to force the numpy
path.
"""

import os

from . import _numpy

BACKEND = "numpy"
_impl = _numpy

if os.environ.get("SSC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        _impl = _ckernels
        BACKEND = "cython"

patch_energy = _impl.patch_energy
patch_flux = _impl.patch_flux
patch_hessian = _impl.patch_hessian


def get_backend(name):
    """Return the kernel module for ``"numpy"`` or ``"cython"``."""
    if name == "numpy":
        return _numpy
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
