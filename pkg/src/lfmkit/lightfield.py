"""Light field / volume data model and the 2D <-> 4D bookkeeping.

Axis conventions:
    LightField4D.data  -> (A_x, A_y, S_x, S_y)
    Volume3D.data      -> (nD, V_x, V_y)
    spatial image      -> (A_x*S_x, A_y*S_y), lenslet-major (raw sensor layout)
    angular image      -> (A_x*S_x, A_y*S_y), view-major (perspective tiles)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    a.setflags(write=False)
    return a


def _pair(v):
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


@dataclass(frozen=True)
class Calibration:
    lenslet_pitch_um: float = 112.0
    sensor_pitch_um: float = 3.45
    pixels_per_lenslet: float = 33

    def to_dict(self):
        return {
            "lenslet_pitch_um": float(self.lenslet_pitch_um),
            "sensor_pitch_um": float(self.sensor_pitch_um),
            "pixels_per_lenslet": self.pixels_per_lenslet,
        }


@dataclass(frozen=True, eq=False)
class Image2D:
    data: np.ndarray
    pixel_um: float | None = None

    def __post_init__(self):
        a = _frozen(self.data)
        if a.ndim != 2:
            raise DimensionError(f"Image2D needs a 2D array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("Image2D values must be finite")
        object.__setattr__(self, "data", a)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    voxel_um: tuple = (1.0, 1.0, 1.0)  # (lat, lat, ax)

    def __post_init__(self):
        a = _frozen(self.data)
        if a.ndim != 3 or min(a.shape) < 1:
            raise DimensionError(f"Volume3D needs a non-empty (nD, V_x, V_y) array, got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("Volume3D intensities must be finite and >= 0")
        object.__setattr__(self, "data", a)
        object.__setattr__(self, "voxel_um", tuple(float(v) for v in self.voxel_um))

    @property
    def n_depths(self):
        return self.data.shape[0]

    @property
    def lateral_shape(self):
        return self.data.shape[1:]


@dataclass(frozen=True, eq=False)
class LightField4D:
    data: np.ndarray
    calib: Calibration = field(default_factory=Calibration)

    def __post_init__(self):
        a = _frozen(self.data)
        if a.ndim != 4:
            raise DimensionError(f"LightField4D needs (A_x, A_y, S_x, S_y), got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("light field intensities must be finite and >= 0")
        object.__setattr__(self, "data", a)

    @property
    def angular_dims(self):
        return self.data.shape[:2]

    @property
    def spatial_dims(self):
        return self.data.shape[2:]

    def to_spatial(self):
        return Image2D(lf_to_spatial(self.data), self.calib.lenslet_pitch_um / self.data.shape[0])

    @classmethod
    def from_spatial(cls, img, A, calib=None):
        arr = img.data if isinstance(img, Image2D) else np.asarray(img)
        if calib is None:
            calib = Calibration(pixels_per_lenslet=_pair(A)[0])
        return cls(spatial_to_lf(arr, A), calib)


def _split_dims(shape, A, S):
    Ax, Ay = _pair(A)
    if S is None:
        if shape[0] % Ax or shape[1] % Ay:
            raise DimensionError(f"image {shape} not divisible into {Ax}x{Ay}-pixel lenslets")
        S = (shape[0] // Ax, shape[1] // Ay)
    Sx, Sy = _pair(S)
    if shape != (Ax * Sx, Ay * Sy):
        raise DimensionError(f"image {shape} does not match A={Ax, Ay}, S={Sx, Sy}")
    return Ax, Ay, Sx, Sy


def spatial_to_lf(img, A, S=None):
    """Lenslet-major 2D image -> (A_x, A_y, S_x, S_y) array."""
    img = np.asarray(img)
    Ax, Ay, Sx, Sy = _split_dims(img.shape, A, S)
    return img.reshape(Sx, Ax, Sy, Ay).transpose(1, 3, 0, 2)


def lf_to_spatial(lf):
    Ax, Ay, Sx, Sy = lf.shape
    return np.asarray(lf).transpose(2, 0, 3, 1).reshape(Sx * Ax, Sy * Ay)


def lf_to_angular(lf):
    Ax, Ay, Sx, Sy = lf.shape
    return np.asarray(lf).transpose(0, 2, 1, 3).reshape(Ax * Sx, Ay * Sy)


def spatial_to_angular(img, A, S=None):
    """Regroup pixels by their position under the lenslet (perspective views).

    out[a_x*S_x + s_x, a_y*S_y + s_y] = in[s_x*A_x + a_x, s_y*A_y + a_y]
    """
    wrap = isinstance(img, Image2D)
    arr = img.data if wrap else np.asarray(img)
    Ax, Ay, Sx, Sy = _split_dims(arr.shape, A, S)
    out = arr.reshape(Sx, Ax, Sy, Ay).transpose(1, 0, 3, 2).reshape(Ax * Sx, Ay * Sy)
    return Image2D(out, img.pixel_um) if wrap else out


def angular_to_spatial(img, A, S=None):
    wrap = isinstance(img, Image2D)
    arr = img.data if wrap else np.asarray(img)
    Ax, Ay, Sx, Sy = _split_dims(arr.shape, A, S)
    out = arr.reshape(Ax, Sx, Ay, Sy).transpose(1, 0, 3, 2).reshape(Sx * Ax, Sy * Ay)
    return Image2D(out, img.pixel_um) if wrap else out


WHITE_FLOOR = 1e-3


def rectify(raw, white, raw_ppl, target_ppl, grid_offset=(0.0, 0.0), lenslet_pitch_um=112.0):
    """Photometric + geometric rectification of a raw lenslet image.

    ``grid_offset`` is the position (in raw pixel-edge coordinates) of the
    first lenslet's top-left corner.  The output has exactly ``target_ppl``
    pixels per lenslet; intensities are rescaled by (raw_ppl/target_ppl)^2 so
    that the resampling preserves total flux.
    """
    raw = np.asarray(raw.data if isinstance(raw, Image2D) else raw, dtype=np.float64)
    white = np.asarray(white.data if isinstance(white, Image2D) else white, dtype=np.float64)
    if raw.shape != white.shape:
        raise DimensionError(f"white image {white.shape} != raw {raw.shape}")
    if not raw_ppl > 1:
        raise ValueError("raw_ppl must be > 1")
    target_ppl = int(target_ppl)
    if target_ppl < 3 or target_ppl % 2 == 0:
        raise ValueError("target_ppl must be an odd integer >= 3")
    wmean = white.mean()
    if not wmean > 0:
        raise ValueError("white image mean must be positive")
    corrected = raw / np.maximum(white / wmean, WHITE_FLOOR)

    ox, oy = (float(v) for v in grid_offset)
    Sx = int(np.floor((raw.shape[0] - ox) / raw_ppl + 1e-9))
    Sy = int(np.floor((raw.shape[1] - oy) / raw_ppl + 1e-9))
    if ox < 0 or oy < 0 or Sx < 1 or Sy < 1:
        raise DimensionError("lenslet grid exceeds the image bounds")

    scale = raw_ppl / target_ppl
    # rectified pixel center u (edge coords u+0.5) -> raw center coordinate
    u = (np.arange(Sx * target_ppl) + 0.5) * scale + ox - 0.5
    v = (np.arange(Sy * target_ppl) + 0.5) * scale + oy - 0.5
    uu, vv = np.meshgrid(u, v, indexing="ij")
    out = ndimage.map_coordinates(corrected, [uu, vv], order=1, mode="nearest")
    out *= scale * scale
    np.maximum(out, 0.0, out=out)
    calib = Calibration(
        lenslet_pitch_um=lenslet_pitch_um,
        sensor_pitch_um=lenslet_pitch_um / target_ppl,
        pixels_per_lenslet=target_ppl,
    )
    return LightField4D(spatial_to_lf(out, target_ppl, (Sx, Sy)), calib)


def z_project_mean(vol):
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    if data.ndim != 3 or data.shape[0] < 1:
        raise DimensionError("z projection needs a (nD, V_x, V_y) volume with nD >= 1")
    pitch = vol.voxel_um[0] if isinstance(vol, Volume3D) else None
    return Image2D(data.mean(axis=0), pitch)


def _ramp(n, overlap, lo, hi):
    w = np.ones(n)
    if overlap > 0:
        r = (np.arange(overlap) + 0.5) / overlap
        if lo:
            w[:overlap] = r
        if hi:
            w[n - overlap:] = r[::-1]
    return w


def stitch_weights(tile_shape, overlap_px, neighbours):
    """Separable linear border ramps; ``neighbours`` = (up, down, left, right)."""
    up, down, left, right = neighbours
    wr = _ramp(tile_shape[0], overlap_px[0], up, down)
    wc = _ramp(tile_shape[1], overlap_px[1], left, right)
    return np.outer(wr, wc)


def stitch_tiles(tiles, overlap_frac=0.1):
    """Blend a grid of equally sized tiles into a mosaic.

    ``tiles`` is a list of ``(array, (row, col))``; arrays are 2D images or
    (nD, h, w) stacks.  Overlaps are blended with linear ramps that form a
    partition of unity.
    """
    if not tiles:
        raise ValueError("no tiles to stitch")
    if not 0 <= overlap_frac < 0.5:
        raise ValueError("overlap_frac must be in [0, 0.5)")
    arrays = [np.asarray(t.data if hasattr(t, "data") else t, dtype=np.float64) for t, _ in tiles]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise DimensionError("inconsistent tile sizes")
    h, w = shape[-2:]
    ov = (int(round(overlap_frac * h)), int(round(overlap_frac * w)))
    step = (h - ov[0], w - ov[1])
    pos = [tuple(int(v) for v in p) for _, p in tiles]
    if len(set(pos)) != len(pos):
        raise ValueError("duplicate tile positions")
    occupied = set(pos)
    r0 = min(p[0] for p in pos)
    c0 = min(p[1] for p in pos)
    nr = max(p[0] for p in pos) - r0 + 1
    nc = max(p[1] for p in pos) - c0 + 1
    out_shape = shape[:-2] + (nr * step[0] + ov[0], nc * step[1] + ov[1])
    acc = np.zeros(out_shape)
    wsum = np.zeros(out_shape[-2:])
    for a, (r, c) in zip(arrays, pos):
        nb = ((r - 1, c) in occupied, (r + 1, c) in occupied, (r, c - 1) in occupied, (r, c + 1) in occupied)
        wt = stitch_weights((h, w), ov, nb)
        rs = (r - r0) * step[0]
        cs = (c - c0) * step[1]
        acc[..., rs:rs + h, cs:cs + w] += a * wt
        wsum[rs:rs + h, cs:cs + w] += wt
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(wsum > 0, acc / np.where(wsum > 0, wsum, 1.0), 0.0)
    return out
