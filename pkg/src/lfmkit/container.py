"""LFM1 binary container and PGM previews.

Layout: b"LFM1" | u32 LE header length | UTF-8 JSON header | LE float payload.
The payload is row-major in the declared axis order.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import ContainerError
from .lightfield import Calibration, Image2D, LightField4D, Volume3D

MAGIC = b"LFM1"
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_AXES = {
    "lf4d": ["A_x", "A_y", "S_x", "S_y"],
    "vol3d": ["nD", "V_x", "V_y"],
    "img2d": ["W", "H"],
}


def _atomic_write(path, blob):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def pack(kind, array, meta, dtype="f32", extra=None):
    if dtype not in _DTYPES:
        raise ContainerError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = {
        "kind": kind,
        "dims": list(arr.shape),
        "dtype": dtype,
        "axis_order": _AXES.get(kind, [f"d{i}" for i in range(arr.ndim)]),
        "meta": meta,
    }
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + arr.tobytes()


def unpack(blob):
    """Return (header dict, payload ndarray); raises ContainerError on any defect."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ContainerError("bad magic: not an LFM1 container")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise ContainerError("truncated header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    for key in ("kind", "dims", "dtype"):
        if key not in header:
            raise ContainerError(f"header missing {key!r}")
    if header["dtype"] not in _DTYPES:
        raise ContainerError(f"unsupported dtype {header['dtype']!r}")
    dims = [int(d) for d in header["dims"]]
    if any(d < 0 for d in dims):
        raise ContainerError("negative dimension in header")
    dt = np.dtype(_DTYPES[header["dtype"]])
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    payload = blob[8 + hlen:]
    if len(payload) < need:
        raise ContainerError(f"truncated payload: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise ContainerError("payload longer than header dims")
    return header, np.frombuffer(payload, dtype=dt).reshape(dims)


def write_container(obj, path, dtype="f32"):
    if isinstance(obj, LightField4D):
        blob = pack("lf4d", obj.data, obj.calib.to_dict(), dtype)
    elif isinstance(obj, Volume3D):
        blob = pack("vol3d", obj.data, {"voxel_um": list(obj.voxel_um)}, dtype)
    elif isinstance(obj, Image2D):
        blob = pack("img2d", obj.data, {"pixel_um": obj.pixel_um}, dtype)
    elif hasattr(obj, "to_container"):
        blob = obj.to_container(dtype)
    else:
        raise ContainerError(f"cannot serialize {type(obj).__name__}")
    _atomic_write(path, blob)


def read_container(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise
    header, arr = unpack(blob)
    kind = header["kind"]
    meta = header.get("meta") or {}
    # payload is read-only (frombuffer); the types copy anyway
    if kind == "lf4d":
        if arr.ndim != 4:
            raise ContainerError("lf4d payload must be 4D")
        calib = Calibration(
            lenslet_pitch_um=meta.get("lenslet_pitch_um", 112.0),
            sensor_pitch_um=meta.get("sensor_pitch_um", 3.45),
            pixels_per_lenslet=meta.get("pixels_per_lenslet", arr.shape[0]),
        )
        return LightField4D(arr, calib)
    if kind == "vol3d":
        if arr.ndim != 3:
            raise ContainerError("vol3d payload must be 3D")
        return Volume3D(arr, tuple(meta.get("voxel_um", (1.0, 1.0, 1.0))))
    if kind == "img2d":
        if arr.ndim != 2:
            raise ContainerError("img2d payload must be 2D")
        return Image2D(arr, meta.get("pixel_um"))
    if kind == "psf":
        from .optics.psf import PsfStack

        return PsfStack.from_container(header, arr)
    raise ContainerError(f"unknown container kind {kind!r}")


def write_preview(arr, path, bits=8):
    """Min-max scaled PGM plus ``<path>.json`` recording the scaling."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("preview needs a 2D array")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    lo, hi = float(a.min()), float(a.max())
    top = (1 << bits) - 1
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    q = np.rint(scaled * top).astype(">u2" if bits == 16 else "u1")
    head = f"P5\n{a.shape[1]} {a.shape[0]}\n{top}\n".encode("ascii")
    _atomic_write(path, head + q.tobytes())
    with open(f"{path}.json", "w") as fh:
        json.dump({"min": lo, "max": hi, "bits": bits, "shape": list(a.shape)}, fh, indent=2)


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise ContainerError("not a binary PGM")
    fields, pos = [], 2
    while len(fields) < 3:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(int(blob[pos:end]))
        pos = end
    w, h, top = fields
    dt = ">u2" if top > 255 else "u1"
    start = pos + 1  # single whitespace byte after maxval
    return np.frombuffer(blob[start:start + w * h * np.dtype(dt).itemsize], dtype=dt).reshape(h, w)
