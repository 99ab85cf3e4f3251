"""Richardson-Lucy deconvolution of light fields."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, NumericalError
from .lightfield import LightField4D, Volume3D, lf_to_spatial
from .optics.projection import Projector, _voxel_from

EPS_REL = 1e-9


@dataclass(frozen=True)
class DeconvConfig:
    iterations: int = 5
    eps_rel: float = EPS_REL
    mode: str = "invariant"
    method: str = "auto"
    init: str = "uniform"
    smooth: bool = False

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError("iterations must be a positive integer")
        if not self.eps_rel > 0:
            raise ValueError("epsilon must be positive")
        if self.init not in ("uniform", "backprojection"):
            raise ValueError(f"unknown initializer {self.init!r}")


def _sensor(lf):
    if isinstance(lf, LightField4D):
        return lf_to_spatial(lf.data)
    a = np.asarray(lf, dtype=np.float64)
    return lf_to_spatial(a) if a.ndim == 4 else a


def backprojection(lf, psfs, mode="invariant", method="auto", projector=None):
    """Adjoint-only reconstruction Aᵀ I / Aᵀ 1."""
    I = _sensor(lf)
    P = projector or Projector(psfs, I.shape, mode, method)
    eps = EPS_REL * max(float(I.max()), 1e-300)
    norm = np.maximum(P.adjoint(np.ones_like(I)), eps)
    return np.maximum(P.adjoint(I), 0.0) / norm


def rl_update(v, I, P, norm, eps, smooth=False):
    est = P.forward(v)
    ratio = I / np.maximum(est, eps)
    v = v * P.adjoint(ratio) / norm
    np.maximum(v, 0.0, out=v)  # FFT round-off
    if smooth:
        v = ndimage.uniform_filter(v, size=(1, 3, 3), mode="nearest")
    return v


def richardson_lucy_array(I, psfs, cfg=DeconvConfig(), callback=None, projector=None, init=None):
    I = np.asarray(I, dtype=np.float64)
    if np.any(I < 0) or not np.all(np.isfinite(I)):
        raise ValueError("light field must be finite and non-negative")
    imax = float(I.max())
    if imax <= 0:
        raise NumericalError("all-zero light field")
    P = projector or Projector(psfs, I.shape, cfg.mode, cfg.method)
    eps = cfg.eps_rel * imax
    norm = np.maximum(P.adjoint(np.ones_like(I)), eps)
    if init is not None:
        v = np.array(init, dtype=np.float64)
        if v.shape != (P.nD,) + I.shape:
            raise DimensionError("initial volume shape mismatch")
    elif cfg.init == "uniform":
        v = np.full((P.nD,) + I.shape, I.mean() / P.nD)
    else:
        v = backprojection(I, psfs, projector=P)
    for it in range(cfg.iterations):
        v = rl_update(v, I, P, norm, eps, cfg.smooth)
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite values at iteration {it + 1}")
        if callback is not None:
            callback(it + 1, v)
    return v


def richardson_lucy(lf, psfs, cfg=DeconvConfig(), callback=None):
    """Run exactly ``cfg.iterations`` multiplicative updates; returns a Volume3D."""
    I = _sensor(lf)
    if I.shape[0] % psfs.A or I.shape[1] % psfs.A:
        raise DimensionError("light field is not a whole number of lenslets for this PSF stack")
    v = richardson_lucy_array(I, psfs, cfg, callback)
    return Volume3D(v, _voxel_from(psfs))


def poisson_loglik(I, est, eps):
    est = np.maximum(est, eps)
    return float(np.sum(I * np.log(est) - est))
