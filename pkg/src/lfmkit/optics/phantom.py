"""Synthetic test volumes: USAF-style bar targets, tube fields and bead fields.

Specs are plain dicts (JSON friendly)::

    {"kind": "bar-target", "frequencies_lpmm": [128, 645.1], "line_pairs": 3,
     "orientation": "v", "depth_index": null}
    {"kind": "tube-field", "count": 6, "radius_um": [0.5, 1.5], "seed": 1}
    {"kind": "bead-field", "positions": [[z, x, y], ...], "radius_um": 0.5}
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..lightfield import Volume3D

USAF_FREQS = (128.0, 161.3, 203.2, 256.0, 322.5, 406.4, 512.0, 645.1)


def bar_period_vox(freq_lpmm, lat_um):
    return 1.0 / (freq_lpmm * lat_um * 1e-3)


def bar_profile(n, period, line_pairs, start=0.0):
    """Exact area coverage of voxels [j, j+1) by bars [start+kP, start+kP+P/2)."""
    j = np.arange(n, dtype=np.float64)
    cov = np.zeros(n)
    for k in range(line_pairs):
        a = start + k * period
        b = a + period / 2.0
        cov += np.clip(np.minimum(j + 1.0, b) - np.maximum(j, a), 0.0, None)
    return cov


@dataclass(frozen=True)
class BarPatch:
    freq_lpmm: float
    period_vox: float
    orientation: str
    rect: tuple  # (r0, r1, c0, c1), half-open

    def slices(self):
        r0, r1, c0, c1 = self.rect
        return slice(r0, r1), slice(c0, c1)


def bar_layout(freqs, lat_um, shape, line_pairs=3, orientation="v", margin=2, center=False):
    """Pack one patch per frequency into rows across an (H, W) plane."""
    H, W = shape
    periods = [bar_period_vox(f, lat_um) for f in freqs]
    for f, p in zip(freqs, periods):
        if p < 2.0:
            raise ValueError(f"{f} lp/mm exceeds the voxel-grid Nyquist limit (period {p:.2f} < 2 voxels)")
    gap = max(3, int(math.ceil(max(periods) / 2.0)))
    patches = []
    r, c, row_h = margin, margin, 0
    for f, p in zip(freqs, periods):
        along = int(math.ceil(line_pairs * p))
        across = max(6, int(math.ceil(2.5 * p)))
        h, w = (across, along) if orientation == "v" else (along, across)
        if c + w > W - margin:
            r, c, row_h = r + row_h + gap, margin, 0
        if c + w > W - margin or r + h > H - margin:
            raise ValueError("bar target does not fit in the requested plane")
        patches.append(BarPatch(float(f), p, orientation, (r, r + h, c, c + w)))
        c += w + gap
        row_h = max(row_h, h)
    if center and patches:
        r_hi = max(pt.rect[1] for pt in patches)
        c_hi = max(pt.rect[3] for pt in patches)
        dr = (H - r_hi - margin) // 2
        dc = (W - c_hi - margin) // 2
        patches = [BarPatch(pt.freq_lpmm, pt.period_vox, pt.orientation,
                            (pt.rect[0] + dr, pt.rect[1] + dr, pt.rect[2] + dc, pt.rect[3] + dc))
                   for pt in patches]
    return patches


def render_bar_plane(shape, lat_um, freqs=USAF_FREQS, line_pairs=3, orientation="v", margin=2, center=False):
    plane = np.zeros(shape)
    patches = bar_layout(freqs, lat_um, shape, line_pairs, orientation, margin, center)
    for pt in patches:
        r0, r1, c0, c1 = pt.rect
        if orientation == "v":
            prof = bar_profile(c1 - c0, pt.period_vox, line_pairs)
            plane[r0:r1, c0:c1] = prof[None, :]
        else:
            prof = bar_profile(r1 - r0, pt.period_vox, line_pairs)
            plane[r0:r1, c0:c1] = prof[:, None]
    return plane, patches


def _grid_um(dims, voxel):
    nD, Vx, Vy = dims
    lat, _, ax = voxel
    z = (np.arange(nD) - (nD - 1) / 2.0) * ax
    x = (np.arange(Vx) - (Vx - 1) / 2.0) * lat
    y = (np.arange(Vy) - (Vy - 1) / 2.0) * lat
    return np.meshgrid(z, x, y, indexing="ij")


def render_tubes(dims, voxel, count=6, radius_um=(0.5, 1.5), seed=0):
    """Random straight tubes with a one-voxel soft edge, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    Z, X, Y = _grid_um(dims, voxel)
    P = np.stack([Z, X, Y], axis=-1)
    ext = np.array([Z.max() - Z.min(), X.max() - X.min(), Y.max() - Y.min()]) / 2.0
    lat = voxel[0]
    out = np.zeros(Z.shape)
    for _ in range(int(count)):
        p0 = (rng.random(3) * 2.0 - 1.0) * ext
        d = rng.normal(size=3)
        d[0] *= 0.3  # mostly lateral vessels
        d /= np.linalg.norm(d)
        r = rng.uniform(*radius_um)
        rel = P - p0
        along = rel @ d
        dist = np.linalg.norm(rel - along[..., None] * d, axis=-1)
        out = np.maximum(out, np.clip((r - dist) / lat + 0.5, 0.0, 1.0))
    return out


def render_beads(dims, voxel, positions, radius_um=0.0):
    out = np.zeros(dims)
    lat = voxel[0]
    if radius_um <= 0:
        for z, x, y in positions:
            out[int(z), int(x), int(y)] = 1.0
        return out
    nD, Vx, Vy = dims
    zz, xx, yy = np.meshgrid(np.arange(nD), np.arange(Vx), np.arange(Vy), indexing="ij")
    for z, x, y in positions:
        dist = np.sqrt(((zz - z) * voxel[2]) ** 2 + ((xx - x) * lat) ** 2 + ((yy - y) * lat) ** 2)
        out = np.maximum(out, np.clip((radius_um - dist) / lat + 0.5, 0.0, 1.0))
    return out


def render_phantom(spec, dims, voxel=(1.0, 1.0, 1.0)):
    """Render a phantom spec into a Volume3D of shape ``dims = (nD, V_x, V_y)``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"invalid phantom dims {dims}")
    spec = dict(spec or {})
    kind = spec.pop("kind", None)
    vol = np.zeros(dims)
    if kind is None:
        pass
    elif kind == "bar-target":
        freqs = spec.get("frequencies_lpmm", list(USAF_FREQS))
        if freqs:
            di = spec.get("depth_index")
            di = dims[0] // 2 if di is None else int(di)
            plane, _ = render_bar_plane(dims[1:], voxel[0], freqs, int(spec.get("line_pairs", 3)),
                                        spec.get("orientation", "v"), int(spec.get("margin", 2)),
                                        bool(spec.get("center", False)))
            vol[di] = plane
    elif kind == "tube-field":
        vol = render_tubes(dims, voxel, int(spec.get("count", 6)), tuple(spec.get("radius_um", (0.5, 1.5))),
                           int(spec.get("seed", 0)))
    elif kind == "bead-field":
        vol = render_beads(dims, voxel, spec.get("positions", []), float(spec.get("radius_um", 0.0)))
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return Volume3D(vol, voxel)
