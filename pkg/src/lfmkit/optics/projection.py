"""Forward / adjoint light-field imaging operator.

The volume grid and the sensor grid share one lateral lattice (A pixels per
lenslet). For every depth, voxel ``p`` spreads into the sensor through the
kernel of its offset class::

    sensor[q] = sum_d sum_p vol[d, p] * k[d, cls(p)][q - p + R_d]

``invariant`` uses the centre-class kernel everywhere; ``periodic`` uses one
kernel per class. Depths are accumulated in ascending order.

Methods: ``direct`` (compiled gather loop, the bit reference), ``fft``
(invariant: one FFT product per depth; periodic: polyphase FFT over the
lenslet lattice, or a per-class sum when the polyphase tables are too big).
"""
from __future__ import annotations

import numpy as np
from scipy import fft as sfft

from .. import kernels as _k
from ..errors import DimensionError
from ..lightfield import Calibration, LightField4D, Volume3D, lf_to_spatial, spatial_to_lf

POLYPHASE_MAX_BYTES = 512 * 2**20
_DIRECT_MAX_K = 11


def _pad_kernel(k, R_new):
    p = R_new - (k.shape[-1] - 1) // 2
    return np.pad(k, p) if p else k


class Projector:
    def __init__(self, psfs, shape, mode="invariant", method="auto"):
        if mode not in ("invariant", "periodic"):
            raise ValueError(f"unknown projection mode {mode!r}")
        if method not in ("auto", "direct", "fft"):
            raise ValueError(f"unknown projection method {method!r}")
        H, W = (int(s) for s in shape)
        A = psfs.A
        if H % A or W % A:
            raise DimensionError(f"lateral shape {shape} is not a whole number of {A}-pixel lenslets")
        self.stack = psfs.invariant() if mode == "invariant" else psfs
        self.mode = mode
        self.shape = (H, W)
        self.A = A
        self.nD = psfs.n_depths
        Kmax = max(k.shape[1] for k in self.stack.kernels)
        if Kmax > H or Kmax > W:
            raise DimensionError(f"kernel ({Kmax} px) larger than the sensor {shape}")
        if method == "auto":
            method = "fft" if (mode == "invariant" and Kmax > _DIRECT_MAX_K) else "direct"
        self.method = method
        self.cls = self.stack.class_map(self.shape) if self.stack.n_classes > 1 else None
        self._plan = None
        if method == "fft":
            self._plan = self._plan_fft()

    # --- planning ---------------------------------------------------------
    def _plan_fft(self):
        H, W = self.shape
        ks = self.stack.kernels
        Kmax = max(k.shape[1] for k in ks)
        Rmax = (Kmax - 1) // 2
        if self.stack.n_classes == 1:
            N = (sfft.next_fast_len(H + Kmax - 1, True), sfft.next_fast_len(W + Kmax - 1, True))
            # zero-pad every depth to the common size so one crop fits all
            Kh = [sfft.rfft2(_pad_kernel(k[0], Rmax), N) for k in ks]
            return {"kind": "single", "N": N, "Kh": Kh, "R": Rmax}
        A = self.A
        Sx, Sy = H // A, W // A
        m_lo = -((Rmax + A - 1) // A)
        m_hi = (Rmax + A - 1) // A
        L = m_hi - m_lo + 1
        N = (sfft.next_fast_len(Sx + L - 1, True), sfft.next_fast_len(Sy + L - 1, True))
        nbytes = self.nD * A**4 * N[0] * (N[1] // 2 + 1) * 16
        if nbytes > POLYPHASE_MAX_BYTES:
            N = (sfft.next_fast_len(H + Kmax - 1, True), sfft.next_fast_len(W + Kmax - 1, True))
            masks = [self.cls == c for c in range(self.stack.n_classes**2)]
            Kh = [[sfft.rfft2(_pad_kernel(k[c], Rmax), N) for c in range(k.shape[0])] for k in ks]
            return {"kind": "classes", "N": N, "Kh": Kh, "masks": masks, "R": Rmax}
        # polyphase tables: g[j, i, m] = k_cls(i)[m*A + j - i + R]
        inner_cls = self.stack.inner_class(np.arange(A))
        nc = self.stack.n_classes
        G = []
        for k in ks:
            R = (k.shape[1] - 1) // 2
            t = (np.arange(L)[None, None, :] + m_lo) * A + np.arange(A)[:, None, None] \
                - np.arange(A)[None, :, None] + R  # (j, i, m) -> tap index
            valid = (t >= 0) & (t < k.shape[1])
            tc = np.clip(t, 0, k.shape[1] - 1)
            g = np.zeros((A, A, A, A, L, L))
            for ix in range(A):
                for iy in range(A):
                    kern = k[inner_cls[ix] * nc + inner_cls[iy]]
                    tx, vx = tc[:, ix, :], valid[:, ix, :]  # (jx, mx)
                    ty, vy = tc[:, iy, :], valid[:, iy, :]  # (jy, my)
                    vals = kern[tx[:, None, :, None], ty[None, :, None, :]]
                    vals = vals * (vx[:, None, :, None] & vy[None, :, None, :])
                    g[:, :, ix, iy] = vals
            G.append(sfft.rfft2(g.reshape(A * A, A * A, L, L), N))
        return {"kind": "poly", "N": N, "G": G, "m_lo": m_lo, "S": (Sx, Sy)}

    # --- operators --------------------------------------------------------
    def _check(self, x, lead):
        x = np.asarray(x, dtype=np.float64)
        want = ((self.nD,) if lead else ()) + self.shape
        if x.shape != want:
            raise DimensionError(f"expected array of shape {want}, got {x.shape}")
        return x

    def forward(self, vol):
        x = self._check(vol, True)
        if self.method == "direct":
            out = None
            for d in range(self.nD):
                y = _k.sv_conv_forward(x[d], self.cls, self.stack.kernels[d])
                out = y if out is None else out + y
            return out
        p = self._plan
        H, W = self.shape
        if p["kind"] == "single":
            acc = None
            for d in range(self.nD):
                term = sfft.rfft2(x[d], p["N"]) * p["Kh"][d]
                acc = term if acc is None else acc + term
            R = p["R"]
            return sfft.irfft2(acc, p["N"])[R:R + H, R:R + W]
        if p["kind"] == "classes":
            out = np.zeros(self.shape)
            R = p["R"]
            for d in range(self.nD):
                for c, m in enumerate(p["masks"]):
                    full = sfft.irfft2(sfft.rfft2(np.where(m, x[d], 0.0), p["N"]) * p["Kh"][d][c], p["N"])
                    out += full[R:R + H, R:R + W]
            return out
        return self._poly_forward(x)

    def _poly_forward(self, x):
        p = self._plan
        A, (Sx, Sy), N, m_lo = self.A, p["S"], p["N"], p["m_lo"]
        acc = None
        for d in range(self.nD):
            xi = x[d].reshape(Sx, A, Sy, A).transpose(1, 3, 0, 2).reshape(A * A, Sx, Sy)
            Xh = sfft.rfft2(xi, N)
            term = np.einsum("jiab,iab->jab", p["G"][d], Xh, optimize=False)
            acc = term if acc is None else acc + term
        full = sfft.irfft2(acc, N)
        oj = full[:, -m_lo:-m_lo + Sx, -m_lo:-m_lo + Sy]
        return oj.reshape(A, A, Sx, Sy).transpose(2, 0, 3, 1).reshape(Sx * A, Sy * A)

    def adjoint(self, sensor):
        y = self._check(sensor, False)
        H, W = self.shape
        if self.method == "direct":
            return np.stack([_k.sv_conv_adjoint(y, self.cls, self.stack.kernels[d]) for d in range(self.nD)])
        p = self._plan
        if p["kind"] == "single":
            Yh = sfft.rfft2(y, p["N"])
            out = np.empty((self.nD, H, W))
            R = p["R"]
            for d in range(self.nD):
                c = sfft.irfft2(np.conj(p["Kh"][d]) * Yh, p["N"])
                out[d] = np.roll(c, (R, R), axis=(0, 1))[:H, :W]
            return out
        if p["kind"] == "classes":
            Yh = sfft.rfft2(y, p["N"])
            out = np.zeros((self.nD, H, W))
            R = p["R"]
            for d in range(self.nD):
                for c, m in enumerate(p["masks"]):
                    corr = sfft.irfft2(np.conj(p["Kh"][d][c]) * Yh, p["N"])
                    out[d] += np.where(m, np.roll(corr, (R, R), axis=(0, 1))[:H, :W], 0.0)
            return out
        A, (Sx, Sy), N, m_lo = self.A, p["S"], p["N"], p["m_lo"]
        yj = y.reshape(Sx, A, Sy, A).transpose(1, 3, 0, 2).reshape(A * A, Sx, Sy)
        Yh = sfft.rfft2(yj, N)
        out = np.empty((self.nD, H, W))
        for d in range(self.nD):
            ch = np.einsum("jiab,jab->iab", np.conj(p["G"][d]), Yh, optimize=False)
            c = sfft.irfft2(ch, N)
            ci = np.roll(c, (-m_lo, -m_lo), axis=(1, 2))[:, :Sx, :Sy]
            out[d] = ci.reshape(A, A, Sx, Sy).transpose(2, 0, 3, 1).reshape(Sx * A, Sy * A)
        return out


def _calib_from(psfs):
    opt = (psfs.meta or {}).get("optics", {})
    pitch = float(opt.get("lenslet_pitch_um", 112.0))
    return Calibration(pitch, pitch / psfs.A, psfs.A)


def _voxel_from(psfs):
    opt = (psfs.meta or {}).get("optics", {})
    pitch = float(opt.get("lenslet_pitch_um", 112.0))
    M = float(opt.get("M", 40.0))
    d = psfs.depths_um
    ax = float(d[1] - d[0]) if len(d) > 1 else 1.0
    lat = pitch / psfs.A / M
    return (lat, lat, ax)


def forward_project(vol, psfs, mode="invariant", method="auto"):
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != psfs.n_depths:
        raise DimensionError(f"volume has {data.shape[0] if data.ndim == 3 else '?'} depths, PSF stack {psfs.n_depths}")
    sensor = Projector(psfs, data.shape[1:], mode, method).forward(data)
    np.maximum(sensor, 0.0, out=sensor)  # FFT round-off only
    return LightField4D(spatial_to_lf(sensor, psfs.A), _calib_from(psfs))


def adjoint_project(lf, psfs, mode="invariant", method="auto"):
    if isinstance(lf, LightField4D):
        sensor = lf_to_spatial(lf.data)
    else:
        sensor = np.asarray(lf, dtype=np.float64)
        if sensor.ndim == 4:
            sensor = lf_to_spatial(sensor)
    vol = Projector(psfs, sensor.shape, mode, method).adjoint(sensor)
    np.maximum(vol, 0.0, out=vol)
    return Volume3D(vol, _voxel_from(psfs))
