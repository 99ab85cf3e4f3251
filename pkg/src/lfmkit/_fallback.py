"""Pure numpy versions of the compiled kernels (same signatures).

The convolution loops walk the kernel taps in the same row-major order as the
compiled code, so each output element accumulates identical products in an
identical order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _tap_regions(H, W, di, dj):
    """Slices (dst, src) such that dst[p] pairs with src[p - (di, dj)]."""
    i0, i1 = max(0, di), min(H, H + di)
    j0, j1 = max(0, dj), min(W, W + dj)
    dst = (slice(i0, i1), slice(j0, j1))
    src = (slice(i0 - di, i1 - di), slice(j0 - dj, j1 - dj))
    return dst, src


def sv_conv_forward(x, cls, kernels, out, nthreads=1):
    H, W = x.shape
    K = kernels.shape[1]
    R = (K - 1) // 2
    single = kernels.shape[0] == 1
    out[...] = 0.0
    for a in range(K):
        for b in range(K):
            dst, src = _tap_regions(H, W, a - R, b - R)
            xs = x[src]
            if xs.size == 0:
                continue
            if single:
                out[dst] += xs * kernels[0, a, b]
            else:
                out[dst] += xs * kernels[cls[src], a, b]


def sv_conv_adjoint(y, cls, kernels, out, nthreads=1):
    H, W = y.shape
    K = kernels.shape[1]
    R = (K - 1) // 2
    single = kernels.shape[0] == 1
    out[...] = 0.0
    for a in range(K):
        for b in range(K):
            # out[q] += y[q + t] * k[cls[q], t]
            dst, src = _tap_regions(H, W, R - a, R - b)
            ys = y[src]
            if ys.size == 0:
                continue
            if single:
                out[dst] += ys * kernels[0, a, b]
            else:
                out[dst] += ys * kernels[cls[dst], a, b]


def bin_points(gx, gy, weight, out):
    H, W = out.shape
    ix = np.floor(gx + 0.5).astype(np.int64)
    iy = np.floor(gy + 0.5).astype(np.int64)
    ok = (ix >= 0) & (ix < H) & (iy >= 0) & (iy < W)
    flat = ix[ok] * W + iy[ok]
    w = np.full(flat.shape, weight, dtype=np.float64)
    out += np.bincount(flat, weights=w, minlength=H * W).reshape(H, W)
    return int((~ok).sum())


def ncc_valid(template, ref, out, nthreads=1):
    h, w = template.shape
    t = template - template.mean()
    tvar = float(np.sum(t * t))
    oh = ref.shape[0] - h + 1
    # chunk over output rows to bound the window buffer
    step = max(1, int(2_000_000 // max(1, h * w * out.shape[1])))
    for r0 in range(0, oh, step):
        r1 = min(oh, r0 + step)
        win = sliding_window_view(ref[r0:r1 + h - 1], (h, w))
        wmean = win.mean(axis=(-2, -1), keepdims=True)
        e = win - wmean
        wvar = np.sum(e * e, axis=(-2, -1))
        cross = np.sum(e * t, axis=(-2, -1))
        with np.errstate(divide="ignore", invalid="ignore"):
            val = cross / np.sqrt(wvar * tvar)
        val[(wvar <= 0.0) | (tvar <= 0.0)] = 0.0
        out[r0:r1] = np.clip(val, -1.0, 1.0)
