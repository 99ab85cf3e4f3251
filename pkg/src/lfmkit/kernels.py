"""Backend selection for the hot loops.

The Cython extension is used when it imports; otherwise the numpy fallback.
Set ``LFMKIT_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

_impl = _fallback
BACKEND = "python"
if os.environ.get("LFMKIT_BACKEND", "").lower() not in ("python", "numpy", "fallback"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _fallback

_threads = max(1, int(os.environ.get("LFM_THREADS", "1") or 1))


def set_threads(n):
    global _threads
    _threads = max(1, int(n))


def get_threads():
    return _threads


def backend_module(name=None):
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def _prep(x, cls, kernels):
    x = np.ascontiguousarray(x, dtype=np.float64)
    kernels = np.ascontiguousarray(kernels, dtype=np.float64)
    if kernels.ndim == 2:
        kernels = kernels[None]
    if cls is None:
        if kernels.shape[0] != 1:
            raise ValueError("class map required for more than one kernel")
        cls = np.zeros(x.shape, dtype=np.int32)
    cls = np.ascontiguousarray(cls, dtype=np.int32)
    if cls.shape != x.shape:
        raise ValueError("class map shape mismatch")
    if kernels.shape[1] % 2 == 0 or kernels.shape[1] != kernels.shape[2]:
        raise ValueError("kernels must be square with odd size")
    return x, cls, kernels


def sv_conv_forward(x, cls, kernels, backend=None):
    """out[p] = sum_t x[p - t] * kernels[cls[p - t], t]  (zero outside)."""
    x, cls, kernels = _prep(x, cls, kernels)
    out = np.empty_like(x)
    backend_module(backend).sv_conv_forward(x, cls, kernels, out, _threads)
    return out


def sv_conv_adjoint(y, cls, kernels, backend=None):
    """Exact transpose of :func:`sv_conv_forward`."""
    y, cls, kernels = _prep(y, cls, kernels)
    out = np.empty_like(y)
    backend_module(backend).sv_conv_adjoint(y, cls, kernels, out, _threads)
    return out


def bin_points(gx, gy, weight, shape, backend=None):
    out = np.zeros(shape, dtype=np.float64)
    gx = np.ascontiguousarray(gx, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    dropped = backend_module(backend).bin_points(gx, gy, float(weight), out)
    return out, int(dropped)


def ncc_valid(template, ref, backend=None):
    template = np.ascontiguousarray(template, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    h, w = template.shape
    out = np.empty((ref.shape[0] - h + 1, ref.shape[1] - w + 1))
    backend_module(backend).ncc_valid(template, ref, out, _threads)
    return out
