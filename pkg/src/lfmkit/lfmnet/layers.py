"""Layers with hand-written backward passes.

Tensors are plain numpy arrays in (batch, channel, ...) order. Each layer
caches what its backward pass needs during ``forward`` and accumulates
parameter gradients into ``self.grads`` during ``backward``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self


def _init_uniform(rng, shape, fan_in, dtype, gain=6.0):
    # gain 6 keeps activation variance through ReLU stacks; biases use gain 1
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def reflect_pad_backward(g, pads):
    """Adjoint of ``np.pad(x, pads, mode="reflect")``: fold padded gradients back."""
    g = np.array(g, copy=True)
    for ax, (lo, hi) in enumerate(pads):
        if lo == 0 and hi == 0:
            continue
        n = g.shape[ax] - lo - hi
        idx = [slice(None)] * g.ndim
        for j in range(lo):  # padded j mirrors source lo + (lo - j)
            idx[ax] = j
            src = list(idx)
            src[ax] = 2 * lo - j
            g[tuple(src)] += g[tuple(idx)]
        for m in range(hi):  # padded lo + n + m mirrors source lo + n - 2 - m
            idx[ax] = lo + n + m
            src = list(idx)
            src[ax] = lo + n - 2 - m
            g[tuple(src)] += g[tuple(idx)]
        idx[ax] = slice(lo, lo + n)
        g = g[tuple(idx)]
    return g


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._cache, g, 0).astype(g.dtype, copy=False)


class Conv2d(Layer):
    """k x k convolution (cross-correlation), reflect padding (k-1)//2, stride s."""

    kind = "conv2d"

    def __init__(self, c_in, c_out, k=3, stride=1, rng=None, dtype=np.float64):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("Conv2d kernel size must be odd")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        rng = rng or np.random.default_rng(0)
        fan = c_in * k * k
        self.params = {"w": _init_uniform(rng, (c_out, c_in, k, k), fan, dtype),
                       "b": _init_uniform(rng, (c_out,), fan, dtype, 1.0)}
        self.zero_grad()

    def out_size(self, n):
        return (n - 1) // self.stride + 1

    def forward(self, x):
        B, C, H, W = x.shape
        if C != self.c_in:
            raise DimensionError(f"Conv2d expects {self.c_in} channels, got {C}")
        p, k, s = (self.k - 1) // 2, self.k, self.stride
        if p and (H <= p or W <= p):
            raise DimensionError(f"input {H}x{W} too small for reflect padding {p}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect") if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        Ho, Wo = win.shape[2], win.shape[3]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
        out = cols @ self.params["w"].reshape(self.c_out, -1).T + self.params["b"]
        self._cache = (cols, xp.shape, (B, Ho, Wo))
        return np.ascontiguousarray(out.reshape(B, Ho, Wo, self.c_out).transpose(0, 3, 1, 2))

    def backward(self, g):
        cols, xp_shape, (B, Ho, Wo) = self._cache
        k, s, p = self.k, self.stride, (self.k - 1) // 2
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, self.c_out)
        self.grads["w"] += (gf.T @ cols).reshape(self.params["w"].shape)
        self.grads["b"] += gf.sum(axis=0)
        gcols = (gf @ self.params["w"].reshape(self.c_out, -1)).reshape(B, Ho, Wo, self.c_in, k, k)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        return reflect_pad_backward(gxp, ((0, 0), (0, 0), (p, p), (p, p))) if p else gxp


class ConvTranspose2x(Layer):
    """Stride-2, 2x2 transposed convolution: every input pixel paints one 2x2 block."""

    kind = "up"

    def __init__(self, c_in, c_out, rng=None, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        rng = rng or np.random.default_rng(0)
        self.params = {"w": _init_uniform(rng, (c_in, c_out, 2, 2), c_in, dtype),
                       "b": _init_uniform(rng, (c_out,), c_in, dtype, 1.0)}
        self.zero_grad()

    def forward(self, x):
        B, C, H, W = x.shape
        if C != self.c_in:
            raise DimensionError(f"ConvTranspose2x expects {self.c_in} channels, got {C}")
        xf = x.transpose(0, 2, 3, 1).reshape(B * H * W, C)
        self._cache = (xf, (B, H, W))
        y = (xf @ self.params["w"].reshape(C, -1)).reshape(B, H, W, self.c_out, 2, 2)
        y = y.transpose(0, 3, 1, 4, 2, 5).reshape(B, self.c_out, 2 * H, 2 * W)
        return y + self.params["b"][None, :, None, None]

    def backward(self, g):
        xf, (B, H, W) = self._cache
        gr = g.reshape(B, self.c_out, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(B * H * W, -1)
        self.grads["w"] += (xf.T @ gr).reshape(self.params["w"].shape)
        self.grads["b"] += g.sum(axis=(0, 2, 3))
        gx = gr @ self.params["w"].reshape(self.c_in, -1).T
        return np.ascontiguousarray(gx.reshape(B, H, W, self.c_in).transpose(0, 3, 1, 2))


class Conv4dInput(Layer):
    """Light-field input stage.

    Input (B, 1, Ax, Ay, Sx, Sy), weights (nD, 1, 3, 3, fov, fov). Angular axes
    are reflect-padded by one so they keep their size; spatial axes are not
    padded, giving O = S - fov + 1 lenslets. Output (B, nD, Ax, Ay, Ox, Oy).
    """

    kind = "conv4d"

    def __init__(self, nD, fov, rng=None, dtype=np.float64):
        super().__init__()
        if fov < 1 or fov % 2 == 0:
            raise ValueError("fov must be a positive odd integer")
        self.nD, self.fov = nD, fov
        rng = rng or np.random.default_rng(0)
        fan = 9 * fov * fov
        self.params = {"w": _init_uniform(rng, (nD, 1, 3, 3, fov, fov), fan, dtype),
                       "b": _init_uniform(rng, (nD,), fan, dtype, 1.0)}
        self.zero_grad()

    def output_shape(self, in_shape):
        B, C, Ax, Ay, Sx, Sy = in_shape
        if C != 1:
            raise DimensionError("Conv4dInput takes a single-channel light field")
        if Sx < self.fov or Sy < self.fov:
            raise DimensionError(f"spatial size {(Sx, Sy)} smaller than fov {self.fov}")
        if Ax < 2 or Ay < 2:
            raise DimensionError("angular axes need at least 2 pixels for reflect padding")
        return (B, self.nD, Ax, Ay, Sx - self.fov + 1, Sy - self.fov + 1)

    def forward(self, x):
        B, _, Ax, Ay, Ox, Oy = self.output_shape(x.shape)
        f = self.fov
        xp = np.pad(x[:, 0], ((0, 0), (1, 1), (1, 1), (0, 0), (0, 0)), mode="reflect")
        win = sliding_window_view(xp, (3, 3, f, f), axis=(1, 2, 3, 4))
        cols = win.reshape(B * Ax * Ay * Ox * Oy, 9 * f * f)
        out = cols @ self.params["w"].reshape(self.nD, -1).T + self.params["b"]
        self._cache = (cols, xp.shape, (B, Ax, Ay, Ox, Oy))
        return np.ascontiguousarray(out.reshape(B, Ax, Ay, Ox, Oy, self.nD).transpose(0, 5, 1, 2, 3, 4))

    def backward(self, g):
        cols, xp_shape, (B, Ax, Ay, Ox, Oy) = self._cache
        f = self.fov
        gf = g.transpose(0, 2, 3, 4, 5, 1).reshape(-1, self.nD)
        self.grads["w"] += (gf.T @ cols).reshape(self.params["w"].shape)
        self.grads["b"] += gf.sum(axis=0)
        gcols = (gf @ self.params["w"].reshape(self.nD, -1)).reshape(B, Ax, Ay, Ox, Oy, 3, 3, f, f)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for a in range(3):
            for b in range(3):
                for i in range(f):
                    for j in range(f):
                        gxp[:, a:a + Ax, b:b + Ay, i:i + Ox, j:j + Oy] += gcols[..., a, b, i, j]
        gx = reflect_pad_backward(gxp, ((0, 0), (1, 1), (1, 1), (0, 0), (0, 0)))
        return gx[:, None]


def t1_to_t2(t):
    """(B, nD, Ax, Ay, Ox, Oy) -> (B, nD, Ox*Ax, Oy*Ay); each lenslet owns an A x A block."""
    B, D, Ax, Ay, Ox, Oy = t.shape
    return np.ascontiguousarray(t.transpose(0, 1, 4, 2, 5, 3)).reshape(B, D, Ox * Ax, Oy * Ay)


def t2_to_t1(img, A):
    Ax, Ay = A
    B, D, H, W = img.shape
    if H % Ax or W % Ay:
        raise DimensionError(f"T2 size {(H, W)} is not a multiple of A={A}")
    return np.ascontiguousarray(img.reshape(B, D, H // Ax, Ax, W // Ay, Ay).transpose(0, 1, 3, 5, 2, 4))
