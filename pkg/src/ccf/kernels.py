"""Kernel dispatch: the compiled core when importable, numpy otherwise.

Set ``CCF_PURE_PYTHON=1`` to force the numpy kernels.
"""

import os

from . import _pykernels

IMPLEMENTATIONS = {"python": _pykernels}

try:
    from . import _ext
except ImportError:  # extension not built
    _ext = None
else:
    IMPLEMENTATIONS["cython"] = _ext

if _ext is not None and not os.environ.get("CCF_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_impl = IMPLEMENTATIONS[BACKEND]


def use(name):
    """Switch the active implementation (``"cython"`` or ``"python"``)."""
    global BACKEND, _impl
    if name not in IMPLEMENTATIONS:
        raise ValueError(f"kernel implementation {name!r} unavailable; have {sorted(IMPLEMENTATIONS)}")
    BACKEND, _impl = name, IMPLEMENTATIONS[name]


def conv2d(x, w, bias, stride, pad):
    return _impl.conv2d(x, w, bias, stride, pad)


def score_windows(*args):
    return _impl.score_windows(*args)


def leaf_windows(*args):
    return _impl.leaf_windows(*args)
