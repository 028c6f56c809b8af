"""Backend selection for the hot synthesis kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded.  Set ``GANCOMPOSE_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("GANCOMPOSE_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def dwconv3x3(x, k):
    return _impl.dwconv3x3(np.ascontiguousarray(x), np.ascontiguousarray(k))


def dwconv3x3_backward(g, k):
    return _impl.dwconv3x3_backward(np.ascontiguousarray(g), np.ascontiguousarray(k))


def smooth_leaky(x, slope=0.2):
    """Smooth leaky unit; returns the activation and its derivative."""
    flat = np.ascontiguousarray(x).reshape(-1)
    y, d = _impl.smooth_leaky(flat, float(slope))
    return y.reshape(x.shape), d.reshape(x.shape)


def modconv_forward(x, scale, shift, k, field, mix, bias, gain, slope=0.2):
    c = np.ascontiguousarray
    return _impl.modconv_forward(c(x), c(scale), c(shift), c(k), c(field), c(mix), c(bias),
                                 float(gain), float(slope))


def modconv_backward(g, x, scale, k, field, mix, d):
    c = np.ascontiguousarray
    return _impl.modconv_backward(c(g), c(x), c(scale), c(k), c(field), c(mix), c(d))


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Keep freed image buffers in the glibc heap instead of returning them to the OS.

    Tapes hold many multi-megabyte temporaries per step; with default glibc
    settings each one is a fresh mmap and its pages fault in again on every
    step.  Returns False where mallopt is unavailable.
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    ok = mallopt(m_mmap_threshold, min(threshold, 1 << 25)) and mallopt(m_trim_threshold, threshold)
    return bool(ok)


def backends():
    """Return every importable backend module keyed by name."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        return found
    found["compiled"] = _compiled
    return found
