"""Command-line entry point: ``lfmkit <subcommand> [options]``.

Every subcommand reads the JSON run config (``--config``, optional), applies
``--set section.key=value`` overrides and dedicated flags (flags win), writes
its outputs and a run manifest, and exits with

    0 success, 1 other failure, 2 invalid config, 3 missing input, 4 numerical failure.

Errors are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from . import kernels as _k
from .config import RunConfig
from .container import read_container, write_container, write_preview
from .errors import ConfigError, ContainerError, LFMError, NumericalError
from .lightfield import Image2D, LightField4D, Volume3D, rectify, z_project_mean

log = logging.getLogger("lfmkit")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


class MissingInput(LFMError, FileNotFoundError):
    pass


# --- helpers ---------------------------------------------------------------
def _need(path, what="input"):
    if path is None or not os.path.exists(path):
        raise MissingInput(f"{what} not found: {path}")
    return path


def _read(path, kind, what):
    obj = read_container(_need(path, what))
    if not isinstance(obj, kind):
        raise ContainerError(f"{what} {path} holds a {type(obj).__name__}, expected {kind.__name__}")
    return obj


def _read_psf(path):
    from .optics.psf import PsfStack

    return _read(path, PsfStack, "PSF stack")


def _mode(requested, psfs):
    if requested:
        return requested
    return "periodic" if psfs.n_classes > 1 else "invariant"


def _ensure_parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _voxel(cfg, depths):
    oc = cfg.optics()
    lat = oc.voxel_lateral_um
    ax = float(depths[1] - depths[0]) if len(depths) > 1 else 1.0
    return (lat, lat, ax)


def _manifest_path(out):
    return os.path.join(out, "manifest.json") if os.path.isdir(out) else out + ".manifest.json"


def write_manifest(out, command, cfg, args, outputs, t0):
    man = {
        "command": command,
        "argv": [a for a in sys.argv[1:]] if args is None else args,
        "config": cfg.data,
        "config_hash": cfg.hash(),
        "seed": cfg["seed"],
        "threads": cfg["threads"],
        "versions": {"lfmkit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version(), "backend": _k.BACKEND},
        "outputs": outputs,
        "wall_time_s": round(time.perf_counter() - t0, 6),
    }
    path = _manifest_path(out)
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    return path


# --- subcommands -------------------------------------------------------------
def cmd_phantom(cfg, a):
    from .optics.phantom import render_phantom

    ph = cfg["phantom"]
    A = cfg["optics"]["pixels_per_lenslet"]
    depths = ph["depths_um"]
    V = int(ph["lenslets"]) * int(A)
    voxel = _voxel(cfg, depths)
    kind = ph["kind"]
    spec = {"kind": kind}
    if kind == "tube-field":
        spec.update(count=ph["count"], radius_um=ph["radius_um"], seed=cfg["seed"])
    elif kind == "bar-target":
        spec.update(frequencies_lpmm=ph["frequencies_lpmm"], line_pairs=ph["line_pairs"],
                    orientation=ph["orientation"], center=True)
    elif kind == "bead-field":
        spec.update(positions=ph["positions"], radius_um=ph["radius_um"][0])
    vol = render_phantom(spec, (len(depths), V, V), voxel)
    _ensure_parent(a.out)
    write_container(vol, a.out, a.dtype)
    outputs = {"volume": a.out}
    if a.preview:
        write_preview(z_project_mean(vol).data, a.out + ".pgm")
        outputs["preview"] = a.out + ".pgm"
    return outputs


def _build_psf(cfg, depths):
    from .optics.psf import build_psf_stack

    o = cfg["optics"]
    return build_psf_stack(cfg.optics(), depths, int(o["psf_classes"]), o["psf_mode"], int(o["psf_rays"]),
                           cfg["seed"], cfg["threads"], float(o["psf_truncate"]))


def cmd_psf(cfg, a):
    depths = [float(x) for x in (a.depths or cfg["phantom"]["depths_um"])]
    psfs = _build_psf(cfg, depths)
    _ensure_parent(a.out)
    psfs.save(a.out)
    return {"psf": a.out, "n_depths": len(depths), "n_classes": psfs.n_classes}


def cmd_simulate(cfg, a):
    from .optics.projection import forward_project

    vol = _read(a.vol, Volume3D, "volume")
    psfs = _read_psf(a.psf) if a.psf else _build_psf(cfg, cfg["phantom"]["depths_um"])
    lf = forward_project(vol, psfs, _mode(a.mode, psfs))
    if a.photons:
        # Poisson shot noise at the given peak photon count
        rng = np.random.default_rng([cfg["seed"], 7])
        peak = float(lf.data.max()) or 1.0
        noisy = rng.poisson(lf.data * (a.photons / peak)) * (peak / a.photons)
        lf = LightField4D(noisy, lf.calib)
    _ensure_parent(a.out)
    write_container(lf, a.out, a.dtype)
    return {"light_field": a.out}


def cmd_rectify(cfg, a):
    raw = _read(a.raw, Image2D, "raw image")
    white = _read(a.white, Image2D, "white image")
    lf = rectify(raw, white, a.raw_ppl, a.target_ppl, tuple(a.offset),
                 cfg["optics"]["lenslet_pitch_um"])
    _ensure_parent(a.out)
    write_container(lf, a.out, a.dtype)
    return {"light_field": a.out}


def design_from_config(cfg, reduced=False):
    from .design import GridSpec, ScanOptions, TargetSpec

    d = cfg["design"]
    oc = cfg.optics()
    if reduced:
        grid = GridSpec.reduced(oc.F_ml)
    else:
        grid = GridSpec(tuple(d["b_start_um"] + d["b_step_um"] * i for i in range(int(d["b_count"]))),
                        tuple(d["depth_start_um"] + d["depth_step_um"] * i for i in range(int(d["depth_count"]))))
    target = TargetSpec(frequencies_lpmm=tuple(cfg["phantom"]["frequencies_lpmm"]),
                        line_pairs=int(cfg["phantom"]["line_pairs"]), lenslets=int(d["lenslets"]),
                        pixels_per_lenslet=int(d["pixels_per_lenslet"]), orientation=cfg["phantom"]["orientation"],
                        thresh_frac=float(d["thresh_frac"]))
    opts = ScanOptions(rl_iters=int(d["rl_iters"]), mode=d["mode"], n_rays=int(d["n_rays"]),
                       fisher_rays=int(d["fisher_rays"]), fisher=bool(d["fisher"]), seed=cfg["seed"],
                       threads=cfg["threads"])
    return grid, target, opts


def cmd_design_scan(cfg, a):
    from .design import run_design_scan, write_scan_outputs

    grid, target, opts = design_from_config(cfg, a.reduced)
    done = [0]
    n = len(grid.b_values) * len(grid.depths)

    def progress(_ij, rec):
        done[0] += 1
        if rec.get("status") != "ok":
            log.warning("cell %s failed: %s", _ij, rec.get("status"))
        log.info("design cell %d/%d", done[0], n)

    g = run_design_scan(cfg.optics(), grid, target, opts, progress)
    summary = write_scan_outputs(g, a.out)
    with open(os.path.join(a.out, "summary.json"), "w") as fh:
        json.dump({"summary": summary, "n_failed": g.n_failed, "n_b": len(g.b_values), "n_depths": len(g.depths)},
                  fh, indent=2, sort_keys=True)
    return {"dir": a.out, "summary": summary}


def cmd_deconvolve(cfg, a):
    from .deconv import DeconvConfig, richardson_lucy

    lf = _read(a.lf, LightField4D, "light field")
    psfs = _read_psf(a.psf)
    d = cfg["deconv"]
    dc = DeconvConfig(iterations=int(d["iterations"]), mode=d["mode"], method=d["method"], init=d["init"], smooth=bool(d["smooth"]))
    vol = richardson_lucy(lf, psfs, dc, callback=lambda it, v: log.info("RL iteration %d", it))
    _ensure_parent(a.out)
    write_container(vol, a.out, a.dtype)
    return {"volume": a.out, "iterations": dc.iterations}


def _tiles(pattern):
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise MissingInput(f"no tiles match {pattern!r}")
    return paths


def _align_cfg(cfg):
    from .align import AlignConfig

    al = cfg["align"]
    return AlignConfig(threshold=float(al["threshold"]), rl_iters=int(al["rl_iters"]), mode=al["mode"], method=al["method"])


def _compensation(cfg):
    from .align import compensate_depth

    al = cfg["align"]
    rng = compensate_depth(al["z_step_um"], al["ratio_num"], al["ratio_den"], int(al["nD"]))
    return {"z_step_um": al["z_step_um"], "ratio": [al["ratio_num"], al["ratio_den"]], "nD": al["nD"],
            "compensated_range_um": rng}


def cmd_align(cfg, a):
    from .align import build_dataset

    paths = _tiles(a.tiles)
    ref = _read(a.ref, Volume3D, "reference volume")
    psfs = _read_psf(a.psf)
    tiles = [_read(p, LightField4D, "tile") for p in paths]
    ids = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    _, manifest = build_dataset(tiles, ref, psfs, _align_cfg(cfg), ids)
    manifest["depth_compensation"] = _compensation(cfg)
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "alignment.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return {"dir": a.out, "n_accepted": manifest["n_accepted"], "n_tiles": manifest["n_tiles"]}


def cmd_dataset_build(cfg, a):
    from .align import build_dataset

    paths = _tiles(a.tiles)
    ref = _read(a.ref, Volume3D, "reference volume")
    psfs = _read_psf(a.psf)
    tiles = [_read(p, LightField4D, "tile") for p in paths]
    ids = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    pairs, manifest = build_dataset(tiles, ref, psfs, _align_cfg(cfg), ids)
    pdir = os.path.join(a.out, "pairs")
    os.makedirs(pdir, exist_ok=True)
    files = []
    for p in pairs:
        tid = p.provenance["tile"]
        lf_path, vol_path = os.path.join(pdir, f"{tid}.lf"), os.path.join(pdir, f"{tid}.vol")
        write_container(p.lf, lf_path, "f64")
        write_container(p.vol, vol_path, "f64")
        files.append({"tile": tid, "lf": os.path.relpath(lf_path, a.out), "vol": os.path.relpath(vol_path, a.out)})
    manifest["pairs"] = files
    manifest["depth_compensation"] = _compensation(cfg)
    with open(os.path.join(a.out, "dataset.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return {"dir": a.out, "n_pairs": len(pairs)}


def _network_spec(cfg, A=None):
    from .lfmnet.model import NetworkSpec

    n = dict(cfg["network"])
    if A is not None:
        n["A"] = [int(A), int(A)]
    return NetworkSpec(fov=int(n["fov"]), nD=int(n["nD"]), A=tuple(n["A"]), variant=n["variant"], skip=bool(n["skip"]),
                       base_channels=int(n["base_channels"]), max_channels=int(n["max_channels"]), seed=cfg["seed"],
                       dtype=n["dtype"])


def _load_pairs(data_dir, fov, nT):
    index = os.path.join(data_dir, "dataset.json")
    with open(_need(index, "dataset index")) as fh:
        entries = json.load(fh).get("pairs", [])
    lfs, tgts = [], []
    for e in entries:
        lf = _read(os.path.join(data_dir, e["lf"]), LightField4D, "pair light field")
        vol = _read(os.path.join(data_dir, e["vol"]), Volume3D, "pair volume")
        A = lf.angular_dims[0]
        S = lf.spatial_dims[0]
        if S < nT + fov - 1:
            raise ConfigError(f"pair {e['tile']}: {S} lenslets < nT + fov - 1 = {nT + fov - 1}")
        lo = (S - nT) // 2
        lfs.append(lf.data[:, :, lo - (fov - 1) // 2:lo - (fov - 1) // 2 + nT + fov - 1,
                           lo - (fov - 1) // 2:lo - (fov - 1) // 2 + nT + fov - 1])
        tgts.append(vol.data[:, lo * A:(lo + nT) * A, lo * A:(lo + nT) * A])
    if not lfs:
        raise MissingInput(f"no training pairs listed in {index}")
    return np.stack(lfs), np.stack(tgts)


def cmd_train(cfg, a):
    from .lfmnet import checkpoint
    from .lfmnet.model import LFMNet
    from .lfmnet.train import TrainConfig, train

    t = cfg["train"]
    fov, nT = int(cfg["network"]["fov"]), int(t["nT"])
    if a.data:
        lfs, tgts = _load_pairs(a.data, fov, nT)
    elif int(t["synthetic_pairs"]) > 0:
        from .lfmnet.data import SyntheticSource, SyntheticSpec

        spec = SyntheticSpec(A=int(cfg["optics"]["pixels_per_lenslet"]), nD=int(cfg["network"]["nD"]), fov=fov,
                             nT=nT, psf_seed=cfg["seed"])
        src = SyntheticSource(spec, cfg.optics())
        lfs, tgts = src.pairs(range(int(t["synthetic_pairs"])))
    else:
        raise MissingInput("train needs --data <dir> or train.synthetic_pairs > 0")
    A = lfs.shape[1]
    spec = _network_spec(cfg, A)
    if tgts.shape[1] != spec.nD:
        raise ConfigError(f"targets have {tgts.shape[1]} depths, network.nD = {spec.nD}")
    scale = 1.0 / max(float(lfs.max()), 1e-300)
    net = LFMNet(spec)
    tc = TrainConfig(epochs=int(t["epochs"]), batch=int(t["batch"]), lr=float(t["lr"]), seed=cfg["seed"],
                     val_frac=float(t["val_frac"]), augment=bool(t["augment"]), superpose=float(t["superpose"]),
                     schedule=t["schedule"], loss=t["loss"])
    res = train(net, lfs * scale, tgts, tc, callback=lambda ep, r: log.info(
        "epoch %d train %.6g val %.6g", ep, r.loss_curve[-1], r.val_curve[-1]))
    meta = res.metadata(tc)
    meta["input_scale"] = scale
    _ensure_parent(a.out)
    checkpoint.save(net, a.out, meta)
    curve = a.out + ".loss.csv"
    with open(curve, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for i, (l, v) in enumerate(zip(res.loss_curve, res.val_curve), 1):
            fh.write(f"{i},{l!r},{v!r}\n")
    return {"checkpoint": a.out, "loss_curve": curve, "best_epoch": res.best_epoch}


def cmd_infer(cfg, a):
    from .lfmnet import checkpoint
    from .lfmnet.infer import infer, infer_patchwise

    net, meta = checkpoint.load(_need(a.ckpt, "checkpoint"))
    lf = _read(a.lf, LightField4D, "light field")
    scaled = lf.data * float(meta.get("input_scale", 1.0))
    if a.patch and a.symmetrize:
        raise ConfigError("--patch and --symmetrize cannot be combined")
    if a.patch:
        vol = infer_patchwise(net, scaled, a.patch, a.pad)
    else:
        vol = infer(net, scaled, a.pad, symmetrize=a.symmetrize)
    _ensure_parent(a.out)
    write_container(vol, a.out, a.dtype)
    return {"volume": a.out, "shape": list(vol.data.shape)}


def cmd_eval(cfg, a):
    from .metrics import metric_row, psnr, ssim

    pred = read_container(_need(a.pred, "prediction"))
    ref = read_container(_need(a.ref, "reference"))
    x, r = getattr(pred, "data", pred), getattr(ref, "data", ref)
    if x.shape != r.shape:
        raise ConfigError(f"prediction {x.shape} and reference {r.shape} differ in shape")
    e = cfg["eval"]
    peak = e["peak"]
    ids = [a.pred, a.ref]
    p = psnr(x, r, peak)
    s = ssim(x, r, int(e["ssim_window"]), float(e["ssim_sigma"]), peak=peak)
    rows = [metric_row("psnr", p, {"peak": peak}, ids),
            metric_row("ssim", s, {"window": e["ssim_window"], "sigma": e["ssim_sigma"], "peak": peak}, ids)]
    text = json.dumps(rows, indent=2, sort_keys=True)
    print(text)
    if a.out:
        _ensure_parent(a.out)
        with open(a.out, "w") as fh:
            fh.write(text + "\n")
    return {"metrics": a.out, "psnr": rows[0]["value"], "ssim": s}


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "psf": cmd_psf,
    "rectify": cmd_rectify,
    "design-scan": cmd_design_scan,
    "deconvolve": cmd_deconvolve,
    "align": cmd_align,
    "dataset-build": cmd_dataset_build,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap; defaults to $LFM_THREADS, then the config")
    common.add_argument("--dtype", default="f32", choices=("f32", "f64"), help="container payload type")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lfmkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lfmkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="render a synthetic volume")
    s.add_argument("--out", required=True)
    s.add_argument("--preview", action="store_true", help="also write a PGM of the z-projection")

    s = sub.add_parser("psf", parents=[common], help="build a PSF stack")
    s.add_argument("--out", required=True)
    s.add_argument("--depths", type=float, nargs="+", help="depths in um (default: phantom.depths_um)")

    s = sub.add_parser("simulate", parents=[common], help="forward-project a volume to a light field")
    s.add_argument("--vol", required=True)
    s.add_argument("--psf")
    s.add_argument("--mode", choices=("invariant", "periodic"))
    s.add_argument("--photons", type=float, default=0.0, help="peak photon count for Poisson noise (0: none)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("rectify", parents=[common], help="resample a raw lenslet image")
    s.add_argument("--raw", required=True)
    s.add_argument("--white", required=True)
    s.add_argument("--raw-ppl", type=float, required=True)
    s.add_argument("--target-ppl", type=int, required=True)
    s.add_argument("--offset", type=float, nargs=2, default=(0.0, 0.0))
    s.add_argument("--out", required=True)

    s = sub.add_parser("design-scan", parents=[common], help="sweep MLA-sensor distance and depth")
    s.add_argument("--out", required=True)
    s.add_argument("--reduced", action="store_true", help="5 b-values around F_ml x 13 depths")

    s = sub.add_parser("deconvolve", parents=[common], help="Richardson-Lucy reconstruction")
    s.add_argument("--lf", required=True)
    s.add_argument("--psf", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--mode", choices=("invariant", "periodic"))
    s.add_argument("--out", required=True)

    for name, hlp in (("align", "align tiles to a reference volume"),
                      ("dataset-build", "align tiles and store accepted training pairs")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--tiles", required=True, help="glob of light-field containers")
        s.add_argument("--ref", required=True)
        s.add_argument("--psf", required=True)
        s.add_argument("--threshold", type=float)
        s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train LFMNet")
    s.add_argument("--data", help="dataset-build output directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("infer", parents=[common], help="run a checkpoint on a light field")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--lf", required=True)
    s.add_argument("--pad", type=int, default=0, help="reflect padding in lenslets")
    s.add_argument("--patch", type=int, help="patch-wise inference with this many input lenslets")
    s.add_argument("--symmetrize", action="store_true", help="average over the 8 flips/transposes")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="PSNR and SSIM against a reference")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out")
    return p


# dedicated flags that shadow config keys, so the manifest records the value used
_FLAG_KEYS = {
    "deconvolve": (("iters", "deconv.iterations"), ("mode", "deconv.mode")),
    "align": (("threshold", "align.threshold"),),
    "dataset-build": (("threshold", "align.threshold"),),
    "train": (("epochs", "train.epochs"),),
}


def _overrides(a):
    ov = {}
    for item in a.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v
    for attr, key in _FLAG_KEYS.get(a.command, ()):
        if getattr(a, attr, None) is not None:
            ov[key] = getattr(a, attr)
    if a.seed is not None:
        ov["seed"] = a.seed
    threads = a.threads
    if threads is None and os.environ.get("LFM_THREADS"):
        threads = int(os.environ["LFM_THREADS"])
    if threads is not None:
        ov["threads"] = threads
    return ov


def _report(code, exc):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = RunConfig.load(a.config, _overrides(a))
        saved = _k.get_threads()
        _k.set_threads(cfg["threads"])
        try:
            outputs = COMMANDS[a.command](cfg, a)
        finally:
            _k.set_threads(saved)
        write_manifest(a.out if a.out else os.path.abspath(a.pred) + ".eval", a.command, cfg,
                       list(argv) if argv is not None else None, outputs, t0)
    except ConfigError as exc:
        return _report(EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _report(EXIT_MISSING, exc)
    except NumericalError as exc:
        return _report(EXIT_NUMERIC, exc)
    except (LFMError, ValueError, OSError) as exc:
        return _report(EXIT_FAIL, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
