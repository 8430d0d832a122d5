"""Hot tensor-grid kernels with a compiled backend when available.

The Cython extension ``twoscale._ext.kernels`` is used if it was built;
otherwise (or with ``TWOSCALE_PURE_PYTHON=1``) the NumPy versions in
``_kernels_py`` are used. ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _kernels_py

REACTION_CODES = _kernels_py.REACTION_CODES

_impl = _kernels_py
BACKEND = "numpy"
if os.environ.get("TWOSCALE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def weighted_reaction(V, W, kind, k, cap, wx, wy):
    return _impl.weighted_reaction(_c(V), _c(W), REACTION_CODES[kind], float(k), float(cap), _c(wx), _c(wy))


def tensor_sq_error(F, X, Y, wx, wy):
    return float(_impl.tensor_sq_error(_c(F), _c(X), _c(Y), _c(wx), _c(wy)))
