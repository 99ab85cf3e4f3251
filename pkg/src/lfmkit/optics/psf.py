"""Light-field PSF synthesis.

Geometric mode traces paraxial rays with 2x2 ray-transfer matrices through an
ideal telecentric 4f microscope (objective + tube lens, aperture stop of
radius F_obj*NA at the shared focal plane), a square MLA of thin lenslets and
free space to the sensor. Wave mode propagates a scalar field with the
angular-spectrum method.

Sensor pixels use the rectified sampling ``cfg.pixels_per_lenslet``: pixel
``u`` (within lenslet 0's block ``[0, A)``) is centred at
``(u - (A-1)/2) * pitch/A`` on the MLA axis.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import kernels as _k
from ..errors import ContainerError, DimensionError
from .geometry import mla_defocus

MIN_RAYS = 10_000
TRUNCATE_REL = 1e-4


# --- ray transfer ---------------------------------------------------------
def _prop(d):
    return np.array([[1.0, d], [0.0, 1.0]])


def _lens(f):
    return np.array([[1.0, 0.0], [-1.0 / f, 1.0]])


def stop_to_mla_matrix(cfg):
    return _prop(cfg.c) @ _lens(cfg.F_tl) @ _prop(cfg.F_tl)


def source_to_stop_matrix(cfg, depth_um):
    return _prop(cfg.F_obj) @ _lens(cfg.F_obj) @ _prop(cfg.o1(depth_um))


def stop_samples(n_rays, radius, rng):
    """Stratified, jittered samples on a disc (uniform in area)."""
    n = int(math.ceil(math.sqrt(n_rays)))
    i = np.repeat(np.arange(n), n)
    j = np.tile(np.arange(n), n)
    ju = rng.random((2, n * n))
    r = radius * np.sqrt((i + ju[0]) / n)
    phi = 2.0 * np.pi * (j + ju[1]) / n
    return r * np.cos(phi), r * np.sin(phi)


def trace_to_sensor(depth_um, src_xy_um, cfg, n_rays=1_000_000, seed=0):
    """Trace rays from a point source to the sensor; returns hit coordinates in µm.

    ``src_xy_um`` is the lateral source position in an image-aligned object
    frame, so its image lands at ``+M * src``.
    """
    if n_rays < MIN_RAYS:
        raise ValueError(f"geometric mode needs at least {MIN_RAYS} rays, got {n_rays}")
    rng = np.random.default_rng(seed)
    hs_x, hs_y = stop_samples(n_rays, cfg.Obj_r, rng)
    S = source_to_stop_matrix(cfg, depth_um)
    T = stop_to_mla_matrix(cfg)
    pitch = cfg.lenslet_pitch_um
    out = []
    for hs, x_src in ((hs_x, src_xy_um[0]), (hs_y, src_xy_um[1])):
        x0 = -float(x_src)
        # stop row of S is [[0, F], [-1/F, 1 - o1/F]]: the stop height fixes the launch angle
        theta0 = (hs - S[0, 0] * x0) / S[0, 1]
        th_s = S[1, 0] * x0 + S[1, 1] * theta0
        h = T[0, 0] * hs + T[0, 1] * th_s
        th = T[1, 0] * hs + T[1, 1] * th_s
        x_l = pitch * np.rint(h / pitch)
        th = th - (h - x_l) / cfg.F_ml
        out.append(h + cfg.b * th)
    return out[0], out[1]


def to_pixel_coords(x_um, cfg):
    return x_um / cfg.pixel_um + (cfg.A - 1) / 2.0


def _source_pixel(offset_px, A):
    return int(np.floor(offset_px + (A - 1) / 2.0 + 0.5))


def truncate_kernel(kern, rel=TRUNCATE_REL):
    """Zero values below ``rel * max``, crop symmetrically to the support, renormalise."""
    kern = np.where(kern >= rel * kern.max(), kern, 0.0)
    R = (kern.shape[0] - 1) // 2
    nz = np.argwhere(kern > 0)
    r = int(np.abs(nz - R).max()) if nz.size else 0
    kern = kern[R - r:R + r + 1, R - r:R + r + 1]
    return kern / kern.sum()


def geometric_kernel(depth_um, offset_px, cfg, n_rays=1_000_000, seed=0, truncate=TRUNCATE_REL):
    A = cfg.A
    kc = (_source_pixel(offset_px[0], A), _source_pixel(offset_px[1], A))
    src = (offset_px[0] * cfg.pixel_um / cfg.M, offset_px[1] * cfg.pixel_um / cfg.M)
    hx, hy = trace_to_sensor(depth_um, src, cfg, n_rays, seed)
    ux = to_pixel_coords(hx, cfg) - kc[0]
    uy = to_pixel_coords(hy, cfg) - kc[1]
    R = int(max(np.abs(np.floor(ux + 0.5)).max(), np.abs(np.floor(uy + 0.5)).max()))
    kern, dropped = _k.bin_points(ux + R, uy + R, 1.0 / ux.size, (2 * R + 1, 2 * R + 1))
    assert dropped == 0
    return truncate_kernel(kern, truncate) if truncate else kern / kern.sum()


def sensor_image(depth_um, src_xy_um, cfg, shape, origin_px=(0, 0), n_rays=1_000_000, seed=0):
    """Un-centred sensor response on a fixed pixel window starting at ``origin_px``."""
    hx, hy = trace_to_sensor(depth_um, src_xy_um, cfg, n_rays, seed)
    gx = to_pixel_coords(hx, cfg) - origin_px[0]
    gy = to_pixel_coords(hy, cfg) - origin_px[1]
    img, dropped = _k.bin_points(gx, gy, 1.0 / gx.size, shape)
    return img, dropped


# --- wave optics ----------------------------------------------------------
def _asm(field, dx, lam, z):
    n = field.shape[0]
    f = np.fft.fftfreq(n, dx)
    fx, fy = np.meshgrid(f, f, indexing="ij")
    arg = 1.0 / lam**2 - fx**2 - fy**2
    kz = np.sqrt(np.maximum(arg, 0.0))
    H = np.exp(2j * np.pi * z * kz)
    # band limit against transfer-function aliasing
    df = 1.0 / (n * dx)
    flim = 1.0 / (lam * math.sqrt((2.0 * df * z) ** 2 + 1.0))
    H[(arg <= 0) | (np.abs(fx) > flim) | (np.abs(fy) > flim)] = 0.0
    return np.fft.ifft2(np.fft.fft2(field) * H)


def wave_kernel(depth_um, offset_px, cfg, grid=256, oversample=3, truncate=TRUNCATE_REL):
    if grid < 8 or grid & (grid - 1):
        raise ValueError(f"wave-mode grid must be a power of two, got {grid}")
    if oversample < 1 or oversample % 2 == 0:
        raise ValueError("oversample must be a positive odd integer")
    A, os_ = cfg.A, int(oversample)
    dx = cfg.pixel_um / os_
    lam = cfg.lambda_um
    n = grid
    x = (np.arange(n) - n // 2) * dx
    f = np.fft.fftfreq(n, dx)
    fx, fy = np.meshgrid(f, f, indexing="ij")
    xs = offset_px[0] * cfg.pixel_um
    ys = offset_px[1] * cfg.pixel_um
    pupil = (fx**2 + fy**2 <= (cfg.NA / (cfg.M * lam)) ** 2).astype(complex)
    pupil *= np.exp(-2j * np.pi * (fx * xs + fy * ys))
    u = np.fft.fftshift(np.fft.ifft2(pupil))  # x = 0 at index n//2
    a = mla_defocus(depth_um, cfg)
    if a != 0:
        u = _asm(u, dx, lam, a)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    p = cfg.lenslet_pitch_um
    rx = xx - p * np.rint(xx / p)
    ry = yy - p * np.rint(yy / p)
    u = u * np.exp(-1j * np.pi * (rx**2 + ry**2) / (lam * cfg.F_ml))
    inten = np.abs(_asm(u, dx, lam, cfg.b)) ** 2

    kc = (_source_pixel(offset_px[0], A), _source_pixel(offset_px[1], A))
    h = (os_ - 1) // 2
    blocks = []
    for k in kc:
        off = (k - (A - 1) // 2) * os_ + n // 2
        blocks.append((off, min((off - h) // os_, (n - 1 - off - h) // os_)))
    Rw = min(blocks[0][1], blocks[1][1])
    if Rw < 1:
        raise ValueError("wave grid too small for this source offset")
    sl = [slice(off - Rw * os_ - h, off + Rw * os_ + h + 1) for off, _ in blocks]
    m = 2 * Rw + 1
    kern = inten[sl[0], sl[1]].reshape(m, os_, m, os_).sum(axis=(1, 3))
    return truncate_kernel(kern, truncate) if truncate else kern / kern.sum()


def simulate_psf(depth_um, offset_px=(0.0, 0.0), cfg=None, mode="geometric", size=None, seed=0,
                 truncate=TRUNCATE_REL):
    """Normalised sensor kernel centred on the source's own pixel.

    ``offset_px`` is the source image position relative to the lenslet
    centre, in sensor pixels. ``size`` is the ray count (geometric) or the
    FFT grid (wave).
    """
    if cfg is None:
        from .config import OpticalConfig

        cfg = OpticalConfig()
    if mode == "geometric":
        return geometric_kernel(depth_um, offset_px, cfg, int(size or 1_000_000), seed, truncate)
    if mode == "wave":
        return wave_kernel(depth_um, offset_px, cfg, int(size or 256), truncate=truncate)
    raise ValueError(f"unknown PSF mode {mode!r}")


def lenslets_covered(kern, A, source_px=None, frac=0.99):
    """Lenslet columns spanned by the central ``frac`` of the kernel energy.

    Energy is summed per lenslet block (blocks aligned to the sensor grid,
    the source sitting at inner pixel ``source_px``) and the marginal along
    x is cut at the (1-frac)/2 quantiles on both sides.
    """
    R = (kern.shape[0] - 1) // 2
    if source_px is None:
        source_px = (A - 1) // 2
    blk = np.floor_divide(np.arange(-R, R + 1) + source_px, A)
    marg = np.bincount(blk - blk[0], weights=kern.sum(axis=1))
    cum = np.cumsum(marg) / marg.sum()
    tail = 0.5 * (1.0 - frac)
    lo = int(np.searchsorted(cum, tail, side="right"))
    hi = int(np.searchsorted(cum, 1.0 - tail, side="left"))
    return hi - lo + 1


# --- stacks ---------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class PsfStack:
    """Kernels indexed by depth and sub-lenslet offset class.

    ``kernels[d]`` has shape ``(n_classes**2, K_d, K_d)``; class id is
    ``cx * n_classes + cy``. Pixel ``p`` of a sensor row belongs to class
    ``(p % A) * n_classes // A``.
    """

    depths_um: tuple
    A: int
    n_classes: int
    kernels: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = []
        nc = self.n_classes
        if not 1 <= nc <= self.A:
            raise ValueError("n_classes must lie in [1, A]")
        if len(self.kernels) != len(self.depths_um):
            raise DimensionError("one kernel set per depth required")
        for k in self.kernels:
            k = np.array(k, dtype=np.float64)
            if k.ndim == 2:
                k = k[None]
            if k.ndim != 3 or k.shape[0] != nc * nc or k.shape[1] != k.shape[2] or k.shape[1] % 2 == 0:
                raise DimensionError(f"bad kernel block shape {k.shape}")
            if np.any(k < 0) or not np.allclose(k.sum(axis=(1, 2)), 1.0, atol=1e-6, rtol=0):
                raise ValueError("kernels must be non-negative with unit sum")
            k.setflags(write=False)
            ks.append(k)
        object.__setattr__(self, "kernels", tuple(ks))
        object.__setattr__(self, "depths_um", tuple(float(d) for d in self.depths_um))

    @property
    def n_depths(self):
        return len(self.depths_um)

    def inner_class(self, k):
        return (np.asarray(k) % self.A) * self.n_classes // self.A

    def representative_pixel(self, c):
        return int(round((c + 0.5) * self.A / self.n_classes - 0.5))

    @property
    def center_class(self):
        c = int(self.inner_class((self.A - 1) // 2))
        return c * self.n_classes + c

    def class_map(self, shape):
        cx = self.inner_class(np.arange(shape[0]))
        cy = self.inner_class(np.arange(shape[1]))
        return (cx[:, None] * self.n_classes + cy[None, :]).astype(np.int32)

    def invariant(self):
        if self.n_classes == 1:
            return self
        c = self.center_class
        return PsfStack(self.depths_um, self.A, 1, tuple(k[c:c + 1] for k in self.kernels), dict(self.meta))

    def kernel_radius(self, d):
        return (self.kernels[d].shape[1] - 1) // 2

    # serialization
    def to_container(self, dtype="f32"):
        from ..container import pack

        sizes = [int(k.shape[1]) for k in self.kernels]
        offsets = np.concatenate([[0], np.cumsum([k.size for k in self.kernels])]).tolist()
        extra = {
            "depths_um": list(self.depths_um),
            "A": self.A,
            "n_classes": self.n_classes,
            "kernel_sizes": sizes,
            "offsets": [int(o) for o in offsets[:-1]],
        }
        flat = np.concatenate([k.ravel() for k in self.kernels])
        return pack("psf", flat, self.meta, dtype, extra)

    @classmethod
    def from_container(cls, header, flat):
        try:
            sizes = header["kernel_sizes"]
            offs = header["offsets"]
            nc = int(header["n_classes"])
            A = int(header["A"])
            depths = header["depths_um"]
        except KeyError as exc:
            raise ContainerError(f"psf header missing {exc}") from None
        flat = np.asarray(flat, dtype=np.float64)
        ks = []
        for K, o in zip(sizes, offs):
            n = nc * nc * K * K
            if o + n > flat.size:
                raise ContainerError("psf payload shorter than kernel table")
            blk = flat[o:o + n].reshape(nc * nc, K, K)
            if header.get("dtype") == "f32":
                blk = blk / blk.sum(axis=(1, 2), keepdims=True)
            ks.append(blk)
        return cls(tuple(depths), A, nc, tuple(ks), header.get("meta") or {})

    def save(self, path, dtype="f64"):
        from ..container import _atomic_write

        _atomic_write(path, self.to_container(dtype))


def _pad_to(k, K):
    p = (K - k.shape[0]) // 2
    return np.pad(k, p) if p else k


def build_psf_stack(cfg, depths_um, n_classes=1, mode="geometric", size=None, seed=0, threads=None,
                    truncate=TRUNCATE_REL):
    """Synthesize kernels for every (depth, class); parallel over jobs, ordered gather."""
    A = cfg.A
    if not 1 <= n_classes <= A:
        raise ValueError("n_classes must lie in [1, A]")
    reps = [int(round((c + 0.5) * A / n_classes - 0.5)) for c in range(n_classes)]
    jobs = []
    for di, d in enumerate(depths_um):
        for cx in range(n_classes):
            for cy in range(n_classes):
                off = (reps[cx] - (A - 1) / 2.0, reps[cy] - (A - 1) / 2.0)
                ss = np.random.SeedSequence([int(seed), di, cx * n_classes + cy])
                jobs.append((float(d), off, ss))

    def run(job):
        d, off, ss = job
        return simulate_psf(d, off, cfg, mode, size, ss, truncate)

    nthreads = threads or _k.get_threads()
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    per = n_classes * n_classes
    stacks = []
    for di in range(len(depths_um)):
        ks = results[di * per:(di + 1) * per]
        K = max(k.shape[0] for k in ks)
        stacks.append(np.stack([_pad_to(k, K) for k in ks]))
    meta = {"optics": cfg.to_dict(), "mode": mode, "size": size, "seed": int(seed)}
    return PsfStack(tuple(float(d) for d in depths_um), A, n_classes, tuple(stacks), meta)
