"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
kernels are used. Set ``MORPHNAS_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

_ext = None
if os.environ.get("MORPHNAS_BACKEND", "").lower() != "python":
    try:
        from . import _kernels_ext as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"


def _impl(name, arr):
    # the compiled kernels are float32-only; other dtypes (gradient checks) use numpy
    if _ext is not None and arr.dtype == np.float32:
        return getattr(_ext, name)
    return getattr(_kernels_py, name)


def _prep(arr):
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


def available_backends():
    return ["python"] + (["cython"] if _ext is not None else [])


def get_backend(name):
    """Return the kernel module for ``name`` (``"python"`` or ``"cython"``)."""
    if name == "python":
        return _kernels_py
    if name == "cython" and _ext is not None:
        return _ext
    raise ValueError(f"kernel backend {name!r} is not available")


def im2col(xp, kh, kw, stride):
    xp = _prep(xp)
    return _impl("im2col", xp)(xp, kh, kw, stride)


def col2im(cols, shape, kh, kw, stride):
    cols = _prep(cols)
    return _impl("col2im", cols)(cols, tuple(shape), kh, kw, stride)


def maxpool_forward(x, pool):
    x = _prep(x)
    return _impl("maxpool_forward", x)(x, pool)


def maxpool_backward(dout, arg, shape, pool):
    dout = _prep(dout)
    arg = np.ascontiguousarray(arg, dtype=np.int32)
    return _impl("maxpool_backward", dout)(dout, arg, tuple(shape), pool)
