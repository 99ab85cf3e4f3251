"""Full-frame and patch-wise inference."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from ..lightfield import Volume3D
from .train import dihedral


def _lf_array(lf):
    a = np.asarray(getattr(lf, "data", lf))
    if a.ndim != 4:
        raise DimensionError(f"expected a 4D light field (Ax, Ay, Sx, Sy), got shape {a.shape}")
    return a


def pad_lenslets(lf, pad):
    """Reflect-pad the two spatial (lenslet) axes by ``pad`` lenslets."""
    a = _lf_array(lf)
    if pad == 0:
        return a
    if pad >= min(a.shape[2:]):
        raise DimensionError(f"pad {pad} needs at least {pad + 1} lenslets per axis")
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")


def undo_dihedral(vol, code):
    """Inverse of the volume half of ``dihedral(lf, vol, code)``."""
    if code & 4:
        vol = np.swapaxes(vol, -2, -1)
    if code & 1:
        vol = vol[..., ::-1, :]
    if code & 2:
        vol = vol[..., ::-1]
    return np.ascontiguousarray(vol)


def forward_symmetrized(net, lf):
    """Average of the network output over the 8 symmetries of the square.

    Each light field batch (B, Ax, Ay, Sx, Sy) is transformed, passed through
    the network and mapped back. Useful when the optics are symmetric and the
    network was trained with dihedral augmentation.
    """
    x = np.asarray(getattr(lf, "data", lf))
    if x.shape[-4] != x.shape[-3] or x.shape[-2] != x.shape[-1]:
        raise DimensionError("symmetrized inference needs square angular and spatial axes")
    dummy = np.zeros((1, 1))
    acc = None
    for code in range(8):
        xt, _ = dihedral(x, dummy, code)
        y = undo_dihedral(net.forward(xt).astype(np.float64), code)
        acc = y if acc is None else acc + y
    return acc / 8.0


def infer(net, lf, pad=0, voxel_um=None, symmetrize=False):
    """Run the network on the whole frame; output covers S + 2*pad - fov + 1 lenslets per axis."""
    a = pad_lenslets(lf, pad)
    fov = net.spec.fov
    if min(a.shape[2:]) < fov:
        raise DimensionError(f"S + 2*pad = {a.shape[2:]} smaller than fov {fov}")
    out = forward_symmetrized(net, a)[0] if symmetrize else net.forward(a)[0]
    return Volume3D(out.astype(np.float64), voxel_um or (1.0, 1.0, 1.0))


def infer_patchwise(net, lf, patch_S, pad=0, voxel_um=None):
    """Tile the frame with overlapping patches of ``patch_S`` lenslets.

    Every output lenslet is taken from the patch in which it is most central
    (windows are clamped at the frame edges). Each patch is evaluated on the
    same stride grid as the full frame, so for a network whose receptive field
    stays inside the patch the result matches ``infer`` on every lenslet.
    """
    a = pad_lenslets(lf, pad)
    A = net.spec.A
    fov = net.spec.fov
    S = a.shape[2:]
    if patch_S < fov:
        raise DimensionError(f"patch size {patch_S} smaller than fov {fov}")
    if patch_S > min(S):
        raise DimensionError(f"patch size {patch_S} larger than the frame {S}")
    O = (S[0] - fov + 1, S[1] - fov + 1)
    P = patch_S - fov + 1  # output lenslets per patch
    out = np.zeros((net.spec.nD, O[0] * A[0], O[1] * A[1]))

    def start(o, n):
        return int(min(max(o - (P - 1) // 2, 0), n - P))

    cache = {}
    for ox in range(O[0]):
        sx = start(ox, O[0])
        for oy in range(O[1]):
            sy = start(oy, O[1])
            if (sx, sy) not in cache:
                patch = a[:, :, sx:sx + patch_S, sy:sy + patch_S]
                cache = {(sx, sy): net.forward(patch, offset=(sx * A[0], sy * A[1]))[0]}
            blk = cache[(sx, sy)]
            lx, ly = ox - sx, oy - sy
            out[:, ox * A[0]:(ox + 1) * A[0], oy * A[1]:(oy + 1) * A[1]] = \
                blk[:, lx * A[0]:(lx + 1) * A[0], ly * A[1]:(ly + 1) * A[1]]
    return Volume3D(out, voxel_um or (1.0, 1.0, 1.0))
