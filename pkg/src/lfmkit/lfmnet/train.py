"""Mini-batch training with Adam on a mean-squared-error loss."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericalError


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled, applied to weights only
    seed: int = 0
    val_frac: float = 0.125
    max_seconds: float | None = None  # wall-clock budget; stops after the current epoch
    augment: bool = True  # random dihedral symmetry per sample
    schedule: str = "constant"  # or "cosine": anneal lr to lr_min over the epochs
    lr_min: float = 0.0
    superpose: float = 0.0  # probability of adding a second training pair (imaging is linear)
    loss: str = "mse"  # or "live", see loss_and_grad

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.val_frac < 1.0:
            raise ValueError("val_frac must be in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if not 0.0 <= self.superpose <= 1.0:
            raise ValueError("superpose must be a probability")
        if self.loss not in ("mse", "live"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainResult:
    best_params: dict
    best_epoch: int
    best_val: float
    loss_curve: list = field(default_factory=list)  # mean train loss per epoch
    val_curve: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0

    def metadata(self, cfg):
        return {"seed": cfg.seed, "epochs": len(self.loss_curve), "best_epoch": self.best_epoch,
                "best_val": self.best_val, "loss_curve": self.loss_curve, "val_curve": self.val_curve,
                "steps": self.steps}


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:  # dict order is the network's fixed parameter order
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd and k.endswith(".w"):
                upd = upd + self.lr * self.wd * params[k]
            params[k] -= upd.astype(params[k].dtype, copy=False)


def mse(pred, target):
    d = pred - target
    return float(np.mean(d * d))


def loss_and_grad(net, lf, target, kind="mse"):
    """Forward, loss and backward for one batch; returns the loss.

    ``"mse"`` is the mean squared error of the clamped output. ``"live"`` is
    the same except that voxels with a positive target whose pre-clamp value
    is negative are charged (z - y)^2 instead of y^2. That is an upper bound
    that agrees with the MSE wherever the output is positive, and it keeps a
    gradient on voxels the final clamp would otherwise leave stuck at zero.
    """
    pred = net.forward(lf)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    if kind == "mse":
        d = pred - target
        net.backward((2.0 / d.size) * d)
    else:
        z = net.preact
        d = np.where(target > 0, z - target, pred)
        net.backward((2.0 / d.size) * d, preact=True)
    return float(np.mean(d.astype(np.float64) ** 2))


def evaluate(net, lfs, targets, batch=8):
    if len(lfs) == 0:
        return float("nan")
    tot = 0.0
    for i in range(0, len(lfs), batch):
        pred = net.forward(lfs[i:i + batch])
        tot += float(np.sum((pred.astype(np.float64) - targets[i:i + batch]) ** 2))
    return tot / (targets[:len(lfs)].size)


def dihedral(lf, target, code):
    """Apply one of 8 symmetries of the square to a light field and its volume.

    Flipping the sensor image along x reverses both the angular and the
    spatial x axes of the light field and the lateral x axis of the volume.
    """
    if code & 1:
        lf, target = lf[..., ::-1, :, :, :], target[..., ::-1, :]
        lf = lf[..., ::-1, :]
    if code & 2:
        lf, target = lf[..., :, ::-1, :, :], target[..., :, ::-1]
        lf = lf[..., ::-1]
    if code & 4:
        lf = np.swapaxes(np.swapaxes(lf, -4, -3), -2, -1)
        target = np.swapaxes(target, -2, -1)
    return np.ascontiguousarray(lf), np.ascontiguousarray(target)


def split_indices(n, val_frac, seed):
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(n)
    n_val = int(round(n * val_frac))
    if n_val == 0 and val_frac > 0 and n > 1:
        n_val = 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(net, lfs, targets, cfg=TrainConfig(), callback=None):
    """Train in place; the network is left holding the best-validation weights.

    ``lfs`` is (N, Ax, Ay, S, S) and ``targets`` (N, nD, H, W). Shuffling
    uses ``cfg.seed`` only, and samples are accumulated in a fixed order, so
    two runs with the same inputs produce identical loss curves.
    """
    lfs = np.asarray(lfs, dtype=net.dtype)
    targets = np.asarray(targets, dtype=net.dtype)
    if len(lfs) == 0:
        raise ValueError("empty training set")
    if len(lfs) != len(targets):
        raise DimensionError("light fields and targets differ in count")
    tr, va = split_indices(len(lfs), cfg.val_frac, cfg.seed)
    params = net.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    res = TrainResult({k: v.copy() for k, v in params.items()}, 0, float("inf"))
    t0 = time.perf_counter()
    for ep in range(1, cfg.epochs + 1):
        if cfg.schedule == "cosine":
            opt.lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * (ep - 1) / cfg.epochs))
        order = tr[rng.permutation(tr.size)]
        tot, nb = 0.0, 0
        for i in range(0, order.size, cfg.batch):
            idx = order[i:i + cfg.batch]
            xb, yb = lfs[idx], targets[idx]
            if cfg.superpose:
                # the forward model is linear, so x1 + x2 images v1 + v2 exactly
                mates = tr[rng.integers(0, tr.size, size=idx.size)]
                use = (rng.random(idx.size) < cfg.superpose)[:, None, None, None]
                xb = xb + np.where(use[..., None], lfs[mates], 0)
                yb = yb + np.where(use, targets[mates], 0)
            if cfg.augment:
                codes = rng.integers(0, 8, size=idx.size)
                pairs = [dihedral(xb[j], yb[j], int(c)) for j, c in enumerate(codes)]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])
            net.zero_grad()
            loss = loss_and_grad(net, xb, yb, cfg.loss)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {ep}, step {res.steps + 1} (batch {idx.tolist()})")
            grads = net.gradients()
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient in {k} at epoch {ep}")
            opt.step(params, grads)
            res.steps += 1
            tot += loss
            nb += 1
        res.loss_curve.append(tot / nb)
        val = evaluate(net, lfs[va], targets[va]) if va.size else res.loss_curve[-1]
        res.val_curve.append(val)
        if val < res.best_val:
            res.best_val, res.best_epoch = val, ep
            res.best_params = {k: v.copy() for k, v in params.items()}
        if callback is not None:
            callback(ep, res)
        if cfg.max_seconds is not None and time.perf_counter() - t0 > cfg.max_seconds:
            break
    res.seconds = time.perf_counter() - t0
    net.set_parameters(res.best_params)
    return res
