"""Closed-form blur geometry of the LF microscope (thin-lens, paraxial)."""
from __future__ import annotations

import math

import numpy as np

from ..errors import PoleError

POLE_EPS = 1e-9


def intermediate_image_position(o1, cfg, strict=False):
    """Return (i1, i2) for a source at distance ``o1`` in front of the objective.

    i1 is the objective's image distance (``math.inf`` at the front focal
    plane unless ``strict``); i2 is the tube-lens image distance, which stays
    finite everywhere.
    """
    F, M = cfg.F_obj, cfg.M
    i2 = M * (F * (1.0 + M) - M * o1)
    if abs(o1 - F) < POLE_EPS * F:
        if strict:
            raise PoleError("i1 diverges for a source at the objective focal plane")
        return math.inf, i2
    return F * o1 / (o1 - F), i2


def tube_lens_radius(o1, cfg):
    i1, _ = intermediate_image_position(o1, cfg)
    if math.isinf(i1):
        return cfg.Obj_r
    return abs(cfg.Obj_r * (i1 - (cfg.M + 1.0) * cfg.F_obj) / i1)


def mla_blur_radius(o1, cfg):
    """ML_b: radius of the defocused beam on the MLA."""
    _, i2 = intermediate_image_position(o1, cfg)
    if i2 <= 0:
        raise ValueError("source too far from focus: i2 <= 0")
    return tube_lens_radius(o1, cfg) * abs(cfg.c - i2) / i2


def blur_lenslet_count(o1, Os, cfg):
    """Number of lenslets covered by an object of size ``Os`` at distance ``o1``."""
    ml_tb = 2.0 * mla_blur_radius(o1, cfg) + cfg.M * Os
    return ml_tb / cfg.lenslet_pitch_um


def blur_count_at_depth(depth_um, Os, cfg):
    return blur_lenslet_count(cfg.o1(depth_um), Os, cfg)


def blur_curve(depths_um, Os, cfg):
    return np.array([blur_count_at_depth(float(d), Os, cfg) for d in depths_um])


def mla_defocus(depth_um, cfg):
    """a = c - i2: distance from the intermediate image to the MLA (positive: image in front)."""
    _, i2 = intermediate_image_position(cfg.o1(depth_um), cfg)
    return cfg.c - i2


def lf2_locus(depth_um, cfg):
    """Sensor distance b that refocuses the intermediate image through the lenslets.

    Returns ``math.inf`` at the pole a = F_ml and 0 when the image sits on
    the MLA (a = 0).
    """
    a = mla_defocus(depth_um, cfg)
    return thin_lens_b(a, cfg.F_ml)


def thin_lens_b(a, F_ml, strict=False):
    if math.isinf(a):
        return F_ml
    if a == 0:
        return 0.0
    if abs(a - F_ml) <= POLE_EPS * F_ml:
        if strict:
            raise PoleError("a equals F_ml: conjugate at infinity")
        return math.inf
    return 1.0 / (1.0 / F_ml - 1.0 / a)
