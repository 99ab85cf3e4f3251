"""Scalar image-quality and information metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NumericalError

DEFAULT_FI_STEP = (0.1, 0.1, 0.25)
FI_EPS_REL = 1e-12


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FisherMatrix:
    F: np.ndarray
    steps: tuple

    @property
    def trace(self):
        return float(np.trace(self.F))

    def is_symmetric(self, rtol=1e-8):
        scale = max(np.abs(self.F).max(), 1e-300)
        return bool(np.abs(self.F - self.F.T).max() <= rtol * scale)

    def is_psd(self, rtol=1e-8):
        ev = np.linalg.eigvalsh(0.5 * (self.F + self.F.T))
        return bool(ev.min() >= -rtol * max(self.trace, 0.0))


def _stencil(psf_at, p, b, h_step):
    p = np.asarray(p, dtype=np.float64)
    h0 = np.asarray(psf_at(tuple(p), b), dtype=np.float64)
    pairs = []
    for i, h in enumerate(h_step):
        e = np.zeros(3)
        e[i] = h
        hp = np.asarray(psf_at(tuple(p + e), b), dtype=np.float64)
        hm = np.asarray(psf_at(tuple(p - e), b), dtype=np.float64)
        if hp.shape != h0.shape or hm.shape != h0.shape:
            raise ValueError("stencil kernels must share dimensions")
        pairs.append((hp, hm))
    return h0, pairs


def fisher_information(psf_at, p, b=None, h_step=DEFAULT_FI_STEP, eps_rel=FI_EPS_REL):
    """Fisher information of a normalised PSF w.r.t. the source position.

    F_ij = sum_pixels (d_i h)(d_j h) / h, central differences, pixels with
    h < eps_rel * max(h) skipped.
    """
    h0, pairs = _stencil(psf_at, p, b, h_step)
    hmax = h0.max()
    mask = h0 >= eps_rel * hmax if hmax > 0 else np.zeros(h0.shape, bool)
    if not mask.any():
        raise NumericalError("degenerate PSF: no pixel above the Fisher-information floor")
    d = [((hp - hm) / (2.0 * h))[mask] for (hp, hm), h in zip(pairs, h_step)]
    w = 1.0 / h0[mask]
    F = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            F[i, j] = F[j, i] = float(np.sum(d[i] * d[j] * w))
    return FisherMatrix(F, tuple(float(h) for h in h_step))


def expected_log_hessian(psf_at, p, b=None, h_step=DEFAULT_FI_STEP, eps_rel=FI_EPS_REL):
    """sum_pixels h * d_i d_j ln h (equals minus the Fisher information)."""
    p = np.asarray(p, dtype=np.float64)
    h0 = np.asarray(psf_at(tuple(p), b), dtype=np.float64)
    mask = h0 >= eps_rel * h0.max()

    def logp(q):
        v = np.asarray(psf_at(tuple(q), b), dtype=np.float64)[mask]
        return np.log(np.maximum(v, 1e-300))

    base = logp(p)
    E = np.eye(3) * np.asarray(h_step)[:, None]
    H = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            if i == j:
                val = (logp(p + E[i]) - 2.0 * base + logp(p - E[i])) / h_step[i] ** 2
            else:
                val = (logp(p + E[i] + E[j]) - logp(p + E[i] - E[j]) - logp(p - E[i] + E[j])
                       + logp(p - E[i] - E[j])) / (4.0 * h_step[i] * h_step[j])
            H[i, j] = H[j, i] = float(np.sum(h0[mask] * val))
    return H


def contrast(img, patch=None):
    a = _arr(img)
    if patch is not None:
        r0, r1, c0, c1 = patch
        a = a[r0:r1, c0:c1]
    if a.size == 0:
        raise ValueError("empty patch")
    hi, lo = float(a.max()), float(a.min())
    if hi + lo == 0:
        raise NumericalError("contrast undefined: Imax + Imin = 0")
    return (hi - lo) / (hi + lo)


def pearson(a, b):
    x, y = _arr(a).ravel(), _arr(b).ravel()
    if x.shape != y.shape:
        raise ValueError("pearson needs equal sizes")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx <= 0 or syy <= 0:
        raise NumericalError("pearson undefined for zero-variance input")
    return max(-1.0, min(1.0, float(dx @ dy) / math.sqrt(sxx * syy)))


def psnr(x, ref, peak=None):
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    a, r = _arr(x), _arr(ref)
    if a.shape != r.shape:
        raise ValueError("psnr needs equal shapes")
    if peak is None:
        peak = float(r.max())
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - r) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filt_valid(a, g):
    h = g.size // 2
    out = ndimage.correlate1d(a, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[h:a.shape[0] - h, h:a.shape[1] - h]


def ssim_map(x, ref, win=11, sigma=1.5, K1=0.01, K2=0.03, peak=None):
    a, r = _arr(x), _arr(ref)
    if a.shape != r.shape or a.ndim != 2:
        raise ValueError("ssim_map needs two equal-shape 2D arrays")
    if win % 2 == 0:
        raise ValueError("SSIM window size must be odd")
    if win > min(a.shape):
        raise ValueError(f"SSIM window {win} larger than image {a.shape}")
    if peak is None:
        peak = float(r.max()) or 1.0
    g = gaussian_window(win, sigma)
    mx, my = _filt_valid(a, g), _filt_valid(r, g)
    sxx = _filt_valid(a * a, g) - mx * mx
    syy = _filt_valid(r * r, g) - my * my
    sxy = _filt_valid(a * r, g) - mx * my
    C1, C2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    return ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))


def ssim(x, ref, win=11, sigma=1.5, K1=0.01, K2=0.03, peak=None):
    """Mean SSIM; volumes (nD, H, W) are averaged slice by slice with a shared peak."""
    a, r = _arr(x), _arr(ref)
    if a.shape != r.shape:
        raise ValueError("ssim needs equal shapes")
    if peak is None:
        peak = float(r.max()) or 1.0
    if a.ndim == 2:
        return float(ssim_map(a, r, win, sigma, K1, K2, peak).mean())
    if a.ndim == 3:
        return float(np.mean([ssim_map(a[i], r[i], win, sigma, K1, K2, peak).mean() for i in range(a.shape[0])]))
    raise ValueError("ssim supports 2D images and 3D stacks")


def fwhm(profile, sample_pitch=1.0):
    """Width above half maximum with linear interpolation at both crossings."""
    p = np.asarray(profile, dtype=np.float64).ravel()
    if p.size < 3:
        raise ValueError("profile too short")
    top = p.max()
    if not top > 0:
        raise NumericalError("profile has no positive peak")
    half = 0.5 * top
    above = p > half
    idx = np.flatnonzero(above)
    if idx.size == 0:
        raise NumericalError("no half-maximum crossing")
    i0, i1 = idx[0], idx[-1]
    if idx.size != i1 - i0 + 1:
        raise NumericalError("multiple regions above half maximum")
    if i0 == 0 or i1 == p.size - 1:
        raise NumericalError("profile does not fall below half maximum on both sides")
    left = (i0 - 1) + (half - p[i0 - 1]) / (p[i0] - p[i0 - 1])
    right = i1 + (p[i1] - half) / (p[i1] - p[i1 + 1])
    return float((right - left) * sample_pitch)


def metric_row(metric, value, params=None, input_ids=None):
    v = value
    if isinstance(v, float) and math.isinf(v):
        v = "identical"
    return {"metric": metric, "value": v, "params": params or {}, "input_ids": list(input_ids or [])}
