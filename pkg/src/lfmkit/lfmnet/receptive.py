"""Receptive-field analysis for chains of conv / down / up layers.

Layers are ``(kind, k)`` pairs: ``conv`` (stride 1, pad (k-1)//2),
``down`` (stride 2, pad (k-1)//2) and ``up`` (2x2 transposed, stride 2).

For encoder-only chains the classic closed form applies,
r = 1 + sum (k_i - 1) * prod_{j<i} s_j. Once an ``up`` layer is involved
the dependence of an output pixel depends on its position modulo the
upsampling factor, so the calculator propagates the exact index interval of
each output phase back to the input (an ``up`` maps fine pixels [a, b] to
coarse pixels [a // 2, b // 2]) and reports the widest one.
"""
from __future__ import annotations

import math

import numpy as np

from .layers import Conv2d, ConvTranspose2x

KINDS = ("conv", "down", "up")


def _check(layers):
    layers = [(str(kind), int(k)) for kind, k in layers]
    for kind, k in layers:
        if kind not in KINDS:
            raise ValueError(f"unsupported layer kind {kind!r}")
        if kind == "up" and k != 2:
            raise ValueError("only 2x2 stride-2 up layers are supported")
        if kind != "up" and (k < 1 or k % 2 == 0):
            raise ValueError(f"{kind} kernel size must be odd, got {k}")
    return layers


def encoder_rf(layers):
    """Closed form 1 + sum (k - 1) * jump for chains without up layers."""
    r, jump = 1, 1
    for kind, k in _check(layers):
        if kind == "up":
            raise ValueError("closed form does not cover up layers")
        r += (k - 1) * jump
        if kind == "down":
            jump *= 2
    return r


def _interval(layers, p):
    a = b = p
    for kind, k in reversed(layers):
        h = (k - 1) // 2
        if kind == "conv":
            a, b = a - h, b + h
        elif kind == "down":
            a, b = 2 * a - h, 2 * b - h + k - 1
        else:
            a, b = a // 2, b // 2
    return a, b


def receptive_field(layers):
    """Widest input extent (pixels) any interior output pixel depends on."""
    layers = _check(layers)
    n_up = sum(kind == "up" for kind, _ in layers)
    n_down = sum(kind == "down" for kind, _ in layers)
    period = 2 ** (n_up + n_down)
    base = 1000 * period
    best = 0
    for p in range(base, base + period):
        a, b = _interval(layers, p)
        best = max(best, b - a + 1)
    return best


def _ones_chain(layers, dtype=np.float64):
    mods = []
    for kind, k in layers:
        if kind == "up":
            m = ConvTranspose2x(1, 1, dtype=dtype)
        else:
            m = Conv2d(1, 1, k, 2 if kind == "down" else 1, dtype=dtype)
        m.params["w"][...] = 1.0
        m.params["b"][...] = 0.0
        mods.append(m)
    return mods


def probe_receptive_field(layers, width=None, chunk=32):
    """Measure the receptive field by perturbing single input pixels.

    The chain is built with all-one weights and no activation, so every
    structural dependence shows up as a strictly positive change. Each input
    column of one row is bumped in turn, the changed output columns are
    recorded, and the widest input span feeding one interior output column is
    returned.
    """
    layers = _check(layers)
    mods = _ones_chain(layers)
    n_down = sum(kind == "down" for kind, _ in layers)
    st = 2 ** max(n_down, 1)
    if width is None:
        # generous frame: running-jump sum plus slack for every up layer
        jump, bound = 1.0, 1.0
        for kind, k in layers:
            if kind == "up":
                bound += 2 * jump
                jump /= 2
            else:
                bound += (k - 1) * jump
                jump *= 2 if kind == "down" else 1
        width = st * math.ceil(3 * bound / st)
    H = 8 * st  # rows only need to survive the reflect padding at the coarsest level
    x0 = np.ones((1, 1, H, width))

    def run(x):
        for m in mods:
            x = m.forward(x)
        return x[:, 0]

    base = run(x0)[0]
    n_out = base.shape[1]
    lo = np.full(n_out, np.iinfo(np.int64).max)
    hi = np.full(n_out, np.iinfo(np.int64).min)
    row = H // 2
    for c0 in range(0, width, chunk):
        cs = np.arange(c0, min(width, c0 + chunk))
        x = np.repeat(x0, cs.size, axis=0)
        x[np.arange(cs.size), 0, row, cs] += 1.0
        changed = np.any(run(x) != base, axis=1)  # (batch, out columns)
        for c, mask in zip(cs, changed):
            idx = np.flatnonzero(mask)
            lo[idx] = np.minimum(lo[idx], c)
            hi[idx] = np.maximum(hi[idx], c)
    # interior output columns: their dependence must not touch the frame edges
    inner = slice(n_out // 3, n_out - n_out // 3)
    if np.any(hi[inner] < lo[inner]) or lo[inner].min() == 0 or hi[inner].max() == width - 1:
        raise ValueError("probe frame too small for this layer chain")
    return int((hi[inner] - lo[inner] + 1).max())


def random_chain(rng, max_levels=3):
    """Random U-Net-like chain (never more ups than downs so far)."""
    layers, depth = [], 0
    n = int(rng.integers(1, 4 * max_levels + 2))
    for _ in range(n):
        r = rng.random()
        if r < 0.5:
            layers.append(("conv", int(rng.choice([1, 3, 5]))))
        elif r < 0.75 and depth < max_levels:
            layers.append(("down", 3))
            depth += 1
        elif depth > 0:
            layers.append(("up", 2))
            depth -= 1
        else:
            layers.append(("conv", 3))
    return layers
