"""Run configuration: one JSON document with a section per pipeline stage.

Every section is validated up front; unknown keys anywhere are rejected.
``RunConfig.load(path, overrides)`` merges flag overrides (``"section.key"``
-> value) on top of the file, file values on top of the defaults.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os

from .errors import ConfigError
from .optics.config import OpticalConfig

_OPTICS = OpticalConfig().to_dict()

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "optics": dict(_OPTICS, psf_mode="geometric", psf_classes=1, psf_rays=200_000, psf_truncate=1e-4),
    "phantom": {
        "kind": "tube-field",
        "lenslets": 9,
        "depths_um": [-6.0, -3.0, 0.0, 3.0, 6.0],
        "count": 6,
        "radius_um": [0.5, 1.5],
        "frequencies_lpmm": [128.0, 161.3, 203.2, 256.0, 322.5, 406.4, 512.0, 645.1],
        "line_pairs": 3,
        "orientation": "v",
        "positions": [],
    },
    "design": {
        "b_start_um": 1000.0,
        "b_step_um": 250.0,
        "b_count": 17,
        "depth_start_um": -32.0,
        "depth_step_um": 1.0,
        "depth_count": 65,
        "pixels_per_lenslet": 7,
        "lenslets": 25,
        "rl_iters": 30,
        "mode": "periodic",
        "thresh_frac": 0.8,
        "fisher": True,
        "n_rays": 200_000,
        "fisher_rays": 400_000,
    },
    "deconv": {"iterations": 5, "mode": "invariant", "method": "auto", "init": "uniform", "smooth": False},
    "align": {
        "threshold": 0.59,
        "rl_iters": 10,
        "mode": "invariant",
        "method": "auto",
        "z_step_um": 0.9,
        "ratio_num": 1.0,
        "ratio_den": 1.44,
        "nD": 64,
    },
    "network": {
        "fov": 9,
        "nD": 64,
        "A": [33, 33],
        "variant": "shallow",
        "skip": False,
        "base_channels": 16,
        "max_channels": 128,
        "dtype": "float32",
    },
    "train": {
        "epochs": 100,
        "batch": 4,
        "lr": 1e-3,
        "val_frac": 0.125,
        "augment": True,
        "superpose": 0.0,
        "schedule": "constant",
        "loss": "mse",
        "nT": 3,
        "synthetic_pairs": 0,
    },
    "eval": {"ssim_window": 11, "ssim_sigma": 1.5, "peak": None},
}

_CHOICES = {
    ("optics", "psf_mode"): ("geometric", "wave"),
    ("phantom", "kind"): ("tube-field", "bar-target", "bead-field", None),
    ("phantom", "orientation"): ("v", "h"),
    ("design", "mode"): ("periodic", "invariant"),
    ("deconv", "mode"): ("periodic", "invariant"),
    ("deconv", "method"): ("auto", "direct", "fft"),
    ("deconv", "init"): ("uniform", "backprojection"),
    ("align", "mode"): ("periodic", "invariant"),
    ("align", "method"): ("auto", "direct", "fft"),
    ("network", "variant"): ("shallow", "full"),
    ("network", "dtype"): ("float32", "float64"),
    ("train", "schedule"): ("constant", "cosine"),
    ("train", "loss"): ("mse", "live"),
}

_POSITIVE = {
    ("design", "b_step_um"), ("design", "depth_step_um"), ("design", "b_count"), ("design", "depth_count"),
    ("design", "lenslets"), ("design", "pixels_per_lenslet"), ("deconv", "iterations"), ("align", "z_step_um"),
    ("align", "ratio_num"), ("align", "ratio_den"), ("align", "nD"), ("network", "fov"), ("network", "nD"),
    ("network", "base_channels"), ("train", "epochs"), ("train", "batch"), ("train", "lr"), ("train", "nT"),
    ("phantom", "lenslets"), ("optics", "psf_classes"), ("optics", "psf_rays"),
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(old, value):
    """Parse a command-line override string using the default's type."""
    if not isinstance(value, str) or isinstance(old, str):
        return value
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


class RunConfig:
    def __init__(self, data=None):
        self.data = _merge(DEFAULTS, data or {})
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=None):
        data = {}
        if path:
            if not os.path.exists(path):
                raise FileNotFoundError(path)
            try:
                with open(path) as fh:
                    data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")
        merged = _merge(DEFAULTS, data)
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            parts = key.split(".")
            node = merged
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = _coerce(node[parts[-1]], value)
        return cls(merged)

    def __getitem__(self, section):
        return self.data[section]

    def validate(self):
        d = self.data
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(d["threads"], int) or d["threads"] < 1:
            raise ConfigError("threads must be a positive integer")
        for (sec, key), allowed in _CHOICES.items():
            if d[sec][key] not in allowed:
                raise ConfigError(f"{sec}.{key} must be one of {allowed}, got {d[sec][key]!r}")
        for sec, key in _POSITIVE:
            v = d[sec][key]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"{sec}.{key} must be a positive number, got {v!r}")
        if not 0 < d["design"]["thresh_frac"] <= 1:
            raise ConfigError("design.thresh_frac must be in (0, 1]")
        if not -1 <= d["align"]["threshold"] <= 1:
            raise ConfigError("align.threshold must be in [-1, 1]")
        if not 0 <= d["train"]["superpose"] <= 1 or not 0 <= d["train"]["val_frac"] < 1:
            raise ConfigError("train.superpose must be in [0, 1] and train.val_frac in [0, 1)")
        if d["network"]["fov"] % 2 == 0:
            raise ConfigError("network.fov must be odd")
        if d["optics"]["psf_classes"] > d["optics"]["pixels_per_lenslet"]:
            raise ConfigError("optics.psf_classes cannot exceed optics.pixels_per_lenslet")
        if not d["phantom"]["depths_um"]:
            raise ConfigError("phantom.depths_um must not be empty")
        self.optics()  # OpticalConfig validation
        return self

    # typed views -----------------------------------------------------
    def optics(self):
        o = {k: v for k, v in self.data["optics"].items() if not k.startswith("psf_")}
        return OpticalConfig.from_dict(o)

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2)

    def hash(self):
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()
