"""Synthetic training pairs: tube-phantom volumes imaged through a periodic PSF stack."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..deconv import DeconvConfig, richardson_lucy_array
from ..lightfield import lf_to_spatial, spatial_to_lf
from ..optics.config import OpticalConfig
from ..optics.phantom import render_tubes
from ..optics.projection import Projector
from ..optics.psf import build_psf_stack


@dataclass(frozen=True)
class SyntheticSpec:
    A: int = 9
    nD: int = 8
    fov: int = 5
    nT: int = 3
    depth_range_um: tuple = (-7.0, 7.0)
    tubes: int = 4
    radius_um: tuple = (0.5, 1.2)
    n_rays: int = 100_000
    psf_seed: int = 0

    @property
    def S(self):
        return self.nT + self.fov - 1

    @property
    def depths(self):
        return tuple(float(d) for d in np.linspace(*self.depth_range_um, self.nD))


class SyntheticSource:
    """Builds the PSF stack once and renders (light field, target) pairs on demand."""

    def __init__(self, spec=SyntheticSpec(), cfg=None):
        self.spec = spec
        self.cfg = (cfg or OpticalConfig()).with_(pixels_per_lenslet=spec.A)
        self.psfs = build_psf_stack(self.cfg, spec.depths, spec.A, "geometric", spec.n_rays, spec.psf_seed,
                                    threads=1)
        V = spec.S * spec.A
        self.shape = (V, V)
        self.projector = Projector(self.psfs, self.shape, "periodic", "fft")
        lat = self.cfg.voxel_lateral_um
        ax = (spec.depths[1] - spec.depths[0]) if spec.nD > 1 else 1.0
        self.voxel_um = (lat, lat, ax)

    def volume(self, seed):
        s = self.spec
        return render_tubes((s.nD,) + self.shape, self.voxel_um, s.tubes, s.radius_um, seed)

    def crop(self, vol):
        s = self.spec
        lo = (s.fov - 1) // 2 * s.A
        n = s.nT * s.A
        return vol[..., lo:lo + n, lo:lo + n]

    def pair(self, seed):
        """(lf (A, A, S, S), target (nD, nT*A, nT*A), sensor image) for one phantom."""
        vol = self.volume(seed)
        sensor = np.maximum(self.projector.forward(vol), 0.0)
        return spatial_to_lf(sensor, self.spec.A), self.crop(vol), sensor

    def pairs(self, seeds):
        lfs, tgts = [], []
        for sd in seeds:
            lf, tg, _ = self.pair(int(sd))
            lfs.append(lf)
            tgts.append(tg)
        return np.stack(lfs), np.stack(tgts)

    def rl_baseline(self, lf_batch, iterations=5):
        """Richardson-Lucy reconstruction of each light field, cropped like the targets."""
        out = []
        cfg = DeconvConfig(iterations=iterations, mode="periodic", method="fft")
        for lf in lf_batch:
            v = richardson_lucy_array(lf_to_spatial(lf), self.psfs, cfg, projector=self.projector)
            out.append(self.crop(v))
        return np.stack(out)
