"""Registration of reconstructed LF tiles against a reference stack.

A tile is deconvolved, both volumes are averaged along z, and the tile's
projection is slid over the reference projection with normalized
cross-correlation (valid region only). The global peak gives the integer
offset of the tile inside the reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from .deconv import DeconvConfig, richardson_lucy
from .errors import DimensionError, NumericalError
from .lightfield import Image2D, LightField4D, Volume3D, z_project_mean

DEFAULT_THRESHOLD = 0.59


@dataclass(frozen=True)
class AlignmentResult:
    shift: tuple  # (row, col) of the tile's top-left corner in the reference
    peak_corr: float
    accepted: bool
    threshold: float

    def to_dict(self):
        return {"shift": list(self.shift), "peak_corr": self.peak_corr, "accepted": self.accepted,
                "threshold": self.threshold}


@dataclass(frozen=True, eq=False)
class DatasetPair:
    lf: LightField4D
    vol: Volume3D
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        A = self.lf.angular_dims
        S = self.lf.spatial_dims
        if (A[0] * S[0], A[1] * S[1]) != tuple(self.vol.lateral_shape):
            raise DimensionError("light field and volume lateral sizes disagree")


@dataclass(frozen=True)
class AlignConfig:
    threshold: float = DEFAULT_THRESHOLD
    rl_iters: int = 10
    mode: str = "invariant"
    method: str = "auto"


def ncc_map(template, reference):
    t = np.asarray(getattr(template, "data", template), dtype=np.float64)
    r = np.asarray(getattr(reference, "data", reference), dtype=np.float64)
    if t.ndim != 2 or r.ndim != 2:
        raise DimensionError("ncc_map works on 2D images")
    if t.shape[0] > r.shape[0] or t.shape[1] > r.shape[1]:
        raise DimensionError(f"template {t.shape} larger than reference {r.shape}")
    return Image2D(_k.ncc_valid(t, r))


def peak_of(cmap):
    """Global maximum; ties resolve to the first in row-major order."""
    a = cmap.data if isinstance(cmap, Image2D) else np.asarray(cmap)
    idx = int(np.argmax(a))
    r, c = divmod(idx, a.shape[1])
    return (r, c), float(a[r, c])


def align_projection(tile_proj, ref_proj, threshold=DEFAULT_THRESHOLD):
    t = np.asarray(getattr(tile_proj, "data", tile_proj), dtype=np.float64)
    if np.ptp(t) == 0:
        raise NumericalError("tile projection has zero variance")
    if np.ptp(np.asarray(getattr(ref_proj, "data", ref_proj))) == 0:
        raise NumericalError("reference projection has zero variance")
    (r, c), peak = peak_of(ncc_map(t, ref_proj))
    return AlignmentResult((r, c), peak, bool(peak > threshold), float(threshold))


def align_tile(lf, psfs, reference_vol, threshold=DEFAULT_THRESHOLD, rl_iters=10, mode="invariant",
               method="auto"):
    rec = richardson_lucy(lf, psfs, DeconvConfig(iterations=rl_iters, mode=mode, method=method))
    return align_projection(z_project_mean(rec), z_project_mean(reference_vol), threshold)


def compensate_depth(n_sample_step, ratio_num, ratio_den, nD):
    """Axial range after refractive-index compensation: nD * step * num / den."""
    if min(n_sample_step, ratio_num, ratio_den) <= 0 or nD < 1:
        raise ValueError("compensate_depth needs positive inputs")
    return nD * n_sample_step * ratio_num / ratio_den


def build_dataset(tiles, reference, psfs, cfg=AlignConfig(), tile_ids=None):
    """Align every tile; accepted ones are paired with the matching reference crop.

    Returns ``(pairs, manifest)``; the manifest lists every tile in input order.
    """
    ids = list(tile_ids) if tile_ids is not None else [f"tile{i:04d}" for i in range(len(tiles))]
    ref_proj = z_project_mean(reference)
    pairs, entries = [], []
    for tid, lf in zip(ids, tiles):
        entry = {"tile": tid}
        try:
            rec = richardson_lucy(lf, psfs, DeconvConfig(iterations=cfg.rl_iters, mode=cfg.mode, method=cfg.method))
            res = align_projection(z_project_mean(rec), ref_proj, cfg.threshold)
        except (NumericalError, DimensionError) as exc:
            entry.update({"accepted": False, "error": str(exc)})
            entries.append(entry)
            continue
        entry.update(res.to_dict())
        if res.accepted:
            V = rec.lateral_shape
            r, c = res.shift
            crop = reference.data[:, r:r + V[0], c:c + V[1]]
            pairs.append(DatasetPair(lf, Volume3D(crop, reference.voxel_um),
                                     {"tile": tid, "shift": list(res.shift), "peak_corr": res.peak_corr}))
        entries.append(entry)
    manifest = {
        "threshold": cfg.threshold,
        "rl_iters": cfg.rl_iters,
        "n_tiles": len(entries),
        "n_accepted": len(pairs),
        "tiles": entries,
        "rejected": [e["tile"] for e in entries if not e["accepted"]],
    }
    return pairs, manifest
