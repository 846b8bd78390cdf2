"""Backend selection for the linear-algebra kernels.

The compiled extension is used when it imports; otherwise (or when
``INCLINE_PURE_PYTHON=1``) the pure-Python twins are used.  Both backends
produce bit-identical results.
"""

import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)


def _load_compiled():
    if os.environ.get("INCLINE_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _kernels
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable; using pure-Python fallback")
        return None
    return _kernels


compiled = _load_compiled()
python = _pykernels

_active = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython", "python") or the active one."""
    if name is None:
        return _active
    if name == "python":
        return python
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown backend {name!r}")


def gram(S):
    return _active.gram(S)


def cross_gram(S, T):
    return _active.cross_gram(S, T)


def cholesky(A, tol):
    return _active.cholesky(A, tol)


def cho_solve(L, B):
    return _active.cho_solve(L, B)
