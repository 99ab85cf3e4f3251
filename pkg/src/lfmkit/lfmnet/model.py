"""LFMNet: a 4D-convolution input stage feeding a 2D U-Net on the lenslet-major image.

The U-Net uses stride-2 3x3 convolutions to go down and 2x2 transposed
convolutions to come back up. Before the U-Net the T2 image is
reflect-padded so its size is a multiple of the total stride; the left pad
is chosen from the patch's global offset so that every patch shares one
stride grid with the full frame.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError
from .layers import Conv2d, Conv4dInput, ConvTranspose2x, ReLU, reflect_pad_backward, t1_to_t2

# Per-level kernel lists (encoder levels fine -> coarse, decoder indexed by level).
LAYOUTS = {
    "shallow": {"enc": [[3, 3], [3]], "bott": [], "dec": [[3], []]},
    "full": {"enc": [[3, 3], [3, 3], [3, 3], [3, 3]], "bott": [], "dec": [[3], [], [], []]},
}


@dataclass(frozen=True)
class NetworkSpec:
    fov: int = 9
    nD: int = 64
    A: tuple = (33, 33)
    variant: str = "shallow"
    skip: bool = False
    base_channels: int = 16
    max_channels: int = 128
    enc: tuple | None = None
    bott: tuple | None = None
    dec: tuple | None = None
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.fov < 3 or self.fov % 2 == 0:
            raise ConfigError(f"fov must be odd and >= 3, got {self.fov}")
        if self.nD < 1 or self.base_channels < 1:
            raise ConfigError("nD and base_channels must be positive")
        if len(self.A) != 2 or min(self.A) < 2:
            raise ConfigError(f"invalid angular size {self.A}")
        if self.variant not in LAYOUTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        lay = self.layout
        if len(lay["enc"]) != len(lay["dec"]):
            raise ConfigError("encoder and decoder need the same number of levels")
        want = 2 if self.variant == "shallow" else 4
        if self.levels != want:
            raise ConfigError(f"{self.variant} variant needs {want} down/up stages")
        for ks in lay["enc"] + lay["dec"] + [lay["bott"]]:
            if any(k < 1 or k % 2 == 0 for k in ks):
                raise ConfigError("kernel sizes must be odd")

    @property
    def layout(self):
        base = LAYOUTS[self.variant]
        return {
            "enc": [list(x) for x in (self.enc if self.enc is not None else base["enc"])],
            "bott": list(self.bott if self.bott is not None else base["bott"]),
            "dec": [list(x) for x in (self.dec if self.dec is not None else base["dec"])],
        }

    @property
    def levels(self):
        return len(self.layout["enc"])

    @property
    def stride(self):
        return 2 ** self.levels

    def channels(self, level):
        return min(self.base_channels * 2 ** level, self.max_channels)

    def main_path(self):
        """Layer chain along the deepest path, as (kind, k) pairs."""
        lay = self.layout
        out = []
        for ks in lay["enc"]:
            out += [("conv", k) for k in ks]
            out.append(("down", 3))
        out += [("conv", k) for k in lay["bott"]]
        for lvl in reversed(range(self.levels)):
            out.append(("up", 2))
            out += [("conv", k) for k in lay["dec"][lvl]]
        out.append(("conv", 1))
        return out

    def output_lateral(self, S, pad=0):
        S = np.asarray(S) + 2 * pad
        return tuple(int(a) * int(s - self.fov + 1) for a, s in zip(self.A, np.broadcast_to(S, (2,))))

    def to_dict(self):
        d = asdict(self)
        d["A"] = list(self.A)
        d.update(self.layout)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown network keys {sorted(bad)}")
        d["A"] = tuple(d.get("A", (33, 33)))
        for k in ("enc", "dec"):
            if d.get(k) is not None:
                d[k] = tuple(tuple(x) for x in d[k])
        if d.get("bott") is not None:
            d["bott"] = tuple(d["bott"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class _Stage:
    conv: object
    act: ReLU = field(default_factory=ReLU)

    def forward(self, x):
        return self.act.forward(self.conv.forward(x))

    def backward(self, g):
        return self.conv.backward(self.act.backward(g))


class LFMNet:
    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        dt = np.dtype(spec.dtype)
        rng = np.random.default_rng(spec.seed)
        lay = spec.layout
        self.input = _Stage(Conv4dInput(spec.nD, spec.fov, rng, dt))
        c = spec.nD
        self.enc, self.down, self.skip_ch = [], [], []
        for lvl, ks in enumerate(lay["enc"]):
            stages = []
            for k in ks:
                stages.append(_Stage(Conv2d(c, spec.channels(lvl), k, 1, rng, dt)))
                c = spec.channels(lvl)
            self.enc.append(stages)
            self.skip_ch.append(c)
            self.down.append(_Stage(Conv2d(c, spec.channels(lvl + 1), 3, 2, rng, dt)))
            c = spec.channels(lvl + 1)
        self.bott = []
        for k in lay["bott"]:
            self.bott.append(_Stage(Conv2d(c, c, k, 1, rng, dt)))
        self.up, self.dec = [None] * spec.levels, [None] * spec.levels
        for lvl in reversed(range(spec.levels)):
            self.up[lvl] = _Stage(ConvTranspose2x(c, spec.channels(lvl), rng, dt))
            c = spec.channels(lvl) + (self.skip_ch[lvl] if spec.skip else 0)
            stages = []
            for k in lay["dec"][lvl]:
                stages.append(_Stage(Conv2d(c, spec.channels(lvl), k, 1, rng, dt)))
                c = spec.channels(lvl)
            self.dec[lvl] = stages
        self.head = _Stage(Conv2d(c, spec.nD, 1, 1, rng, dt))
        self._cache = None

    # --- parameters ------------------------------------------------------
    def named_layers(self):
        out = [("conv4d", self.input.conv)]
        for lvl, stages in enumerate(self.enc):
            out += [(f"enc{lvl}.{i}", s.conv) for i, s in enumerate(stages)]
            out.append((f"down{lvl}", self.down[lvl].conv))
        out += [(f"bott.{i}", s.conv) for i, s in enumerate(self.bott)]
        for lvl in reversed(range(self.spec.levels)):
            out.append((f"up{lvl}", self.up[lvl].conv))
            out += [(f"dec{lvl}.{i}", s.conv) for i, s in enumerate(self.dec[lvl])]
        out.append(("head", self.head.conv))
        return out

    def parameters(self):
        """Ordered {name: array}; arrays are the live parameter buffers."""
        return {f"{n}.{k}": layer.params[k] for n, layer in self.named_layers() for k in sorted(layer.params)}

    def gradients(self):
        return {f"{n}.{k}": layer.grads[k] for n, layer in self.named_layers() for k in sorted(layer.params)}

    def set_parameters(self, params):
        for n, layer in self.named_layers():
            for k in layer.params:
                name = f"{n}.{k}"
                if name not in params:
                    raise KeyError(f"missing parameter {name}")
                v = np.asarray(params[name])
                if v.shape != layer.params[k].shape:
                    raise DimensionError(f"parameter {name}: shape {v.shape} != {layer.params[k].shape}")
                layer.params[k] = v.astype(layer.params[k].dtype)
        self.zero_grad()

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def zero_head(self):
        for v in self.head.conv.params.values():
            v[...] = 0

    def n_params(self):
        return int(sum(v.size for v in self.parameters().values()))

    @property
    def dtype(self):
        return np.dtype(self.spec.dtype)

    # --- forward / backward ----------------------------------------------
    def _as_batch(self, lf):
        x = np.asarray(getattr(lf, "data", lf), dtype=self.dtype)
        if x.ndim == 4:
            x = x[None, None]
        elif x.ndim == 5:
            x = x[:, None]
        if x.ndim != 6 or x.shape[1] != 1:
            raise DimensionError(f"expected a (B, Ax, Ay, Sx, Sy) light field, got {x.shape}")
        if tuple(x.shape[2:4]) != tuple(self.spec.A):
            raise DimensionError(f"angular size {x.shape[2:4]} does not match network A={tuple(self.spec.A)}")
        return x

    def output_shape(self, in_shape):
        """(B, nD, Ox*Ax, Oy*Ay) for a (B, Ax, Ay, Sx, Sy) input; no compute."""
        B, Ax, Ay, Sx, Sy = in_shape
        _, nD, _, _, Ox, Oy = self.input.conv.output_shape((B, 1, Ax, Ay, Sx, Sy))
        return (B, nD, Ox * Ax, Oy * Ay)

    def _grid_pads(self, H, W, offset):
        st = self.spec.stride
        lo = (int(offset[0]) % st, int(offset[1]) % st)
        hi = (-(H + lo[0]) % st, -(W + lo[1]) % st)
        return ((0, 0), (0, 0), (lo[0], hi[0]), (lo[1], hi[1]))

    def forward(self, lf, offset=(0, 0)):
        """Volume batch (B, nD, Ox*Ax, Oy*Ay) for a light-field batch.

        ``offset`` is the T2 position of this input's first output pixel in the
        global frame; it only sets the stride grid phase.
        """
        x = self._as_batch(lf)
        t2 = t1_to_t2(self.input.forward(x))
        H, W = t2.shape[2:]
        pads = self._grid_pads(H, W, offset)
        if max(max(p) for p in pads) >= min(H, W):
            raise DimensionError(f"T2 image {H}x{W} too small for stride grid {self.spec.stride}")
        h = np.pad(t2, pads, mode="reflect") if any(sum(p) for p in pads) else t2
        skips = []
        for lvl in range(self.spec.levels):
            for s in self.enc[lvl]:
                h = s.forward(h)
            skips.append(h)
            h = self.down[lvl].forward(h)
        for s in self.bott:
            h = s.forward(h)
        for lvl in reversed(range(self.spec.levels)):
            h = self.up[lvl].forward(h)
            if self.spec.skip:
                h = np.concatenate([h, skips[lvl]], axis=1)
            for s in self.dec[lvl]:
                h = s.forward(h)
        z = self.head.conv.forward(h)
        h = self.head.act.forward(z)
        crop = (slice(None), slice(None), slice(pads[2][0], pads[2][0] + H), slice(pads[3][0], pads[3][0] + W))
        self._cache = (pads, x.shape, (H, W))
        self.preact = z[crop]  # head output before the final clamp
        return h[crop]

    def backward(self, g, preact=False):
        """Accumulate parameter gradients for d(loss)/d(output) = g; returns d/d(input).

        With ``preact=True``, ``g`` is taken w.r.t. the head output before the
        final clamp (``self.preact``) instead of after it.
        """
        pads, in_shape, (H, W) = self._cache
        gp = np.zeros((g.shape[0], g.shape[1], H + sum(pads[2]), W + sum(pads[3])), dtype=g.dtype)
        gp[:, :, pads[2][0]:pads[2][0] + H, pads[3][0]:pads[3][0] + W] = g
        h = self.head.conv.backward(gp if preact else self.head.act.backward(gp))
        gskips = [None] * self.spec.levels
        for lvl in range(self.spec.levels):
            for s in reversed(self.dec[lvl]):
                h = s.backward(h)
            if self.spec.skip:
                c = self.up[lvl].conv.c_out
                h, gskips[lvl] = h[:, :c], h[:, c:]
            h = self.up[lvl].backward(h)
        for s in reversed(self.bott):
            h = s.backward(h)
        for lvl in reversed(range(self.spec.levels)):
            h = self.down[lvl].backward(h)
            if gskips[lvl] is not None:
                h = h + gskips[lvl]
            for s in reversed(self.enc[lvl]):
                h = s.backward(h)
        if any(sum(p) for p in pads):
            h = reflect_pad_backward(h, pads)
        A = self.spec.A
        B, D = h.shape[:2]
        t1 = h.reshape(B, D, H // A[0], A[0], W // A[1], A[1]).transpose(0, 1, 3, 5, 2, 4)
        return self.input.backward(np.ascontiguousarray(t1))
