"""Optical design scan over MLA->sensor distance b and source depth.

Each grid cell images a USAF-style bar target placed at one depth through a
microscope whose sensor sits at distance b behind the MLA, reconstructs the
target plane and scores it per bar frequency. A point-source Fisher
information is computed alongside. The depth-averaged profile per b and its
argmax summarize which sensor position works best across the depth range.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from .container import write_preview
from .deconv import DeconvConfig, richardson_lucy_array
from .errors import ConfigError
from .lightfield import spatial_to_angular
from .metrics import contrast, fisher_information, pearson
from .optics.geometry import lf2_locus
from .optics.phantom import USAF_FREQS, render_bar_plane
from .optics.projection import Projector
from .optics.psf import build_psf_stack, sensor_image, to_pixel_coords, trace_to_sensor

METRICS = ("contrast", "corr", "fisher")

__all__ = [
    "DesignGrid",
    "GridSpec",
    "TargetSpec",
    "emit_heatmap",
    "highest_frequency_at_threshold",
    "lf2_locus",
    "run_design_scan",
    "write_scan_outputs",
]


def highest_frequency_at_threshold(responses, thresh_frac=0.8):
    """Largest frequency whose value is >= thresh_frac * value at the lowest frequency.

    ``responses`` is a mapping or a sequence of (frequency, value) pairs.
    Returns None when nothing is resolvable (including a non-positive
    baseline).
    """
    items = sorted(responses.items() if hasattr(responses, "items") else responses)
    if not items:
        raise ValueError("empty response list")
    ref = items[0][1]
    if ref is None or not ref > 0:
        return None
    best = None
    for f, v in items:
        if v is not None and v >= thresh_frac * ref:
            best = f
    return best


@dataclass(frozen=True)
class GridSpec:
    b_values: tuple = tuple(1000.0 + 250.0 * i for i in range(17))
    depths: tuple = tuple(float(d) for d in range(-32, 33))

    @classmethod
    def reduced(cls, F_ml=2500.0, step_b=250.0, depth_step=5.0, depth_max=30.0):
        bs = tuple(F_ml + step_b * k for k in (-2, -1, 0, 1, 2))
        n = int(round(depth_max / depth_step))
        return cls(bs, tuple(depth_step * k for k in range(-n, n + 1)))


@dataclass(frozen=True)
class TargetSpec:
    frequencies_lpmm: tuple = USAF_FREQS
    line_pairs: int = 3
    lenslets: int = 25
    pixels_per_lenslet: int = 7
    orientation: str = "v"
    thresh_frac: float = 0.8


@dataclass(frozen=True)
class ScanOptions:
    rl_iters: int = 30
    mode: str = "periodic"  # imaging physics and reconstruction model
    n_rays: int = 200_000
    fisher_rays: int = 400_000
    fisher: bool = True
    seed: int = 0
    threads: int = 1
    contrast: str = "bars"  # or "extrema": max/min of the bar-averaged profile


@dataclass
class DesignGrid:
    b_values: tuple
    depths: tuple
    records: dict = field(default_factory=dict)  # (ib, id) -> dict
    F_ml: float = 2500.0
    locus: list = field(default_factory=list)  # (depth, b)

    def cell(self, ib, idepth):
        return self.records[(ib, idepth)]

    def matrix(self, metric):
        key = {"contrast": "contrast_freq", "corr": "corr_freq", "fisher": "fisher_trace"}.get(metric)
        if key is None:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        m = np.full((len(self.depths), len(self.b_values)), np.nan)
        for (ib, idp), rec in self.records.items():
            if rec.get("status") == "ok":
                v = rec.get(key)
                m[idp, ib] = 0.0 if v is None else float(v)
        return m

    @property
    def n_failed(self):
        return sum(1 for r in self.records.values() if r.get("status") != "ok")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["b_um", "depth_um", "contrast_freq", "corr_freq", "fisher_trace", "fisher_zz", "status"])
        for ib, b in enumerate(self.b_values):
            for idp, d in enumerate(self.depths):
                r = self.records.get((ib, idp), {"status": "missing"})
                w.writerow([repr(float(b)), repr(float(d)), _fmt(r.get("contrast_freq")), _fmt(r.get("corr_freq")),
                            _fmt(r.get("fisher_trace")), _fmt(r.get("fisher_zz")), r.get("status")])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


# --- per-cell evaluation -------------------------------------------------
def bar_contrast(img, truth):
    """(Imax - Imin) / (Imax + Imin) with Imax, Imin the coverage-weighted means
    over the bars and over the gaps of the ground-truth pattern."""
    t = np.clip(truth, 0.0, 1.0)
    on, off = t.sum(), (1.0 - t).sum()
    if on <= 0 or off <= 0:
        raise ValueError("patch has no bars or no gaps")
    hi = float((img * t).sum() / on)
    lo = float((img * (1.0 - t)).sum() / off)
    if hi + lo <= 0:
        return 0.0
    return (hi - lo) / (hi + lo)


def _bar_scores(rec, truth, patches, A, rl_iters, how="bars"):
    """Per-frequency contrast and Pearson against the ground truth."""
    cons, cors = {}, {}
    for pt in patches:
        r0, r1, c0, c1 = pt.rect
        if rl_iters == 0:
            # raw central view lives on the lenslet lattice
            r0, r1, c0, c1 = r0 // A, -(-r1 // A), c0 // A, -(-c1 // A)
        img = rec[r0:r1, c0:c1]
        ref = truth[r0:r1, c0:c1]
        try:
            if how == "bars":
                cons[pt.freq_lpmm] = bar_contrast(img, ref)
            else:
                prof = img.mean(axis=0) if pt.orientation == "v" else img.mean(axis=1)
                cons[pt.freq_lpmm] = contrast(prof)
        except Exception:
            cons[pt.freq_lpmm] = 0.0
        try:
            cors[pt.freq_lpmm] = pearson(img, ref)
        except Exception:
            cors[pt.freq_lpmm] = 0.0
    return cons, cors


def _fisher_cell(cfg, depth, n_rays, seed):
    A = cfg.A
    kc = (A - 1) // 2
    hx, hy = trace_to_sensor(depth, (0.0, 0.0), cfg, n_rays, seed)
    ext = int(np.abs(np.floor(to_pixel_coords(np.concatenate([hx, hy]), cfg) + 0.5) - kc).max()) + A
    shape = (2 * ext + 1, 2 * ext + 1)
    origin = (kc - ext, kc - ext)

    def psf_at(p, _b):
        img, _ = sensor_image(depth + p[2], (p[0], p[1]), cfg, shape, origin, n_rays, seed)
        return img / max(img.sum(), 1e-300)

    return fisher_information(psf_at, (0.0, 0.0, 0.0))


def evaluate_cell(cfg, b, depth, target, opts, cell_seed):
    cfg_b = cfg.with_(b=float(b), pixels_per_lenslet=int(target.pixels_per_lenslet))
    A = cfg_b.A
    V = A * int(target.lenslets)
    lat = cfg_b.voxel_lateral_um
    plane, patches = render_bar_plane((V, V), lat, target.frequencies_lpmm, target.line_pairs,
                                      target.orientation, margin=2, center=True)
    n_classes = A if opts.mode == "periodic" else 1
    ss = np.random.SeedSequence([int(opts.seed), int(cell_seed)])
    psf_seed, fi_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    stack = build_psf_stack(cfg_b, [float(depth)], n_classes, "geometric", opts.n_rays, psf_seed, threads=1)
    method = "fft" if opts.mode == "periodic" else "auto"
    P = Projector(stack, (V, V), opts.mode, method)
    sensor = np.maximum(P.forward(plane[None]), 0.0)
    if opts.rl_iters > 0:
        rec = richardson_lucy_array(sensor, stack, DeconvConfig(iterations=opts.rl_iters, mode=opts.mode,
                                                                method=method), projector=P)[0]
        truth = plane
    else:
        views = spatial_to_angular(sensor, A)
        S = V // A
        c = (A - 1) // 2
        rec = views[c * S:(c + 1) * S, c * S:(c + 1) * S]
        truth = plane.reshape(S, A, S, A).mean(axis=(1, 3))
    cons, cors = _bar_scores(rec, truth, patches, A, opts.rl_iters, opts.contrast)
    out = {
        "status": "ok",
        "contrast": cons,
        "corr": cors,
        "contrast_freq": highest_frequency_at_threshold(cons, target.thresh_frac),
        "corr_freq": highest_frequency_at_threshold(cors, target.thresh_frac),
        "fisher_trace": None,
        "fisher_zz": None,
    }
    if opts.fisher:
        F = _fisher_cell(cfg_b, float(depth), opts.fisher_rays, fi_seed)
        out["fisher_trace"] = F.trace
        out["fisher_zz"] = float(F.F[2, 2])
    return out


def run_design_scan(cfg, grid=None, target=None, opts=None, progress=None):
    grid = grid or GridSpec()
    target = target or TargetSpec()
    opts = opts or ScanOptions()
    if not grid.b_values or not grid.depths:
        raise ConfigError("design grid needs at least one b value and one depth")
    if opts.rl_iters < 0:
        raise ConfigError("rl_iters must be >= 0")
    cells = [(ib, idp) for ib in range(len(grid.b_values)) for idp in range(len(grid.depths))]

    def run(ij):
        ib, idp = ij
        try:
            rec = evaluate_cell(cfg, grid.b_values[ib], grid.depths[idp], target, opts, ib * 100003 + idp)
        except Exception as exc:  # recorded, scan continues
            rec = {"status": f"failed: {type(exc).__name__}: {exc}"}
        if progress is not None:
            progress(ij, rec)
        return rec

    saved = _k.get_threads()
    nthreads = max(1, int(opts.threads))
    try:
        if nthreads > 1:
            _k.set_threads(1)
            with ThreadPoolExecutor(nthreads) as ex:
                results = list(ex.map(run, cells))
        else:
            results = [run(c) for c in cells]
    finally:
        _k.set_threads(saved)
    out = DesignGrid(tuple(float(b) for b in grid.b_values), tuple(float(d) for d in grid.depths),
                     dict(zip(cells, results)), cfg.F_ml)
    out.locus = [(d, lf2_locus(d, cfg)) for d in out.depths]
    return out


# --- reporting -----------------------------------------------------------
def emit_heatmap(grid, metric):
    """Heatmap (depth x b), depth-averaged profile per b, argmax and margin."""
    m = grid.matrix(metric)
    if metric == "fisher":
        top = np.nanmax(m) if np.isfinite(m).any() else 0.0
        if top > 0:
            m = m / top
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(m)
        counts = valid.sum(axis=0)
        prof = np.where(counts > 0, np.nansum(m, axis=0) / np.maximum(counts, 1), np.nan)
    filled = np.where(np.isfinite(prof), prof, -np.inf)
    ib = int(np.argmax(filled))  # first max -> smallest b on ties
    rest = np.delete(filled, ib)
    margin = float(filled[ib] - rest.max()) if rest.size else math.inf
    b = np.asarray(grid.b_values)
    locus = []
    for d, lb in grid.locus:
        if math.isfinite(lb) and b.min() <= lb <= b.max():
            col = float(np.interp(lb, b, np.arange(b.size)))
            locus.append((d, lb, col))
    return {
        "metric": metric,
        "matrix": m,
        "profile": prof,
        "argmax_index": ib,
        "argmax_b": float(b[ib]),
        "margin": margin,
        "failed": int((~valid).sum()),
        "locus": locus,
    }


def write_scan_outputs(grid, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "grid.csv"), "w", newline="") as fh:
        fh.write(grid.to_csv())
    summary = {}
    prof_rows = []
    for metric in METRICS:
        hm = emit_heatmap(grid, metric)
        img = np.nan_to_num(hm["matrix"], nan=0.0)
        write_preview(img, os.path.join(out_dir, f"heatmap_{metric}.pgm"))
        for ib, b in enumerate(grid.b_values):
            prof_rows.append((metric, b, hm["profile"][ib]))
        summary[metric] = {"argmax_b": hm["argmax_b"], "margin": hm["margin"], "failed": hm["failed"]}
    with open(os.path.join(out_dir, "profile.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "b_um", "depth_mean", "is_argmax"])
        for metric, b, v in prof_rows:
            w.writerow([metric, repr(float(b)), repr(float(v)), int(b == summary[metric]["argmax_b"])])
    with open(os.path.join(out_dir, "locus.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["depth_um", "b_um"])
        for d, lb in grid.locus:
            w.writerow([repr(float(d)), repr(float(lb))])
    return summary
