"""LFMW checkpoint files.

Layout: b"LFMW", little-endian u32 header length, UTF-8 JSON header, then the
weights as little-endian arrays in the header's tensor order. The header
holds the network spec, a tensor table (name, shape, byte offset) and free
training metadata.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from ..errors import ContainerError
from .model import LFMNet, NetworkSpec

MAGIC = b"LFMW"
VERSION = 1
_DT = {"float32": "<f4", "float64": "<f8"}


def dumps(net, metadata=None):
    dt = _DT[net.spec.dtype]
    table, chunks, off = [], [], 0
    for name, arr in net.parameters().items():
        b = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": off, "nbytes": len(b)})
        chunks.append(b)
        off += len(b)
    header = {"format": "LFMW", "version": VERSION, "dtype": dt, "spec": net.spec.to_dict(),
              "tensors": table, "metadata": metadata or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def loads(buf):
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContainerError("not an LFMW checkpoint (bad magic)")
    (n,) = struct.unpack("<I", buf[4:8])
    if 8 + n > len(buf):
        raise ContainerError("truncated checkpoint header")
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise ContainerError(f"unsupported checkpoint version {header.get('version')}")
    spec_d = dict(header["spec"])
    net = LFMNet(NetworkSpec.from_dict(spec_d))
    payload = buf[8 + n:]
    dt = np.dtype(header["dtype"])
    params = {}
    end = 0
    for t in header["tensors"]:
        lo, hi = t["offset"], t["offset"] + t["nbytes"]
        if hi > len(payload):
            raise ContainerError(f"truncated payload for tensor {t['name']}")
        params[t["name"]] = np.frombuffer(payload[lo:hi], dtype=dt).reshape(t["shape"])
        end = max(end, hi)
    if end != len(payload):
        raise ContainerError("checkpoint payload length does not match the tensor table")
    try:
        net.set_parameters(params)
    except KeyError as exc:
        raise ContainerError(str(exc)) from exc
    return net, header.get("metadata", {})


def save(net, path, metadata=None):
    data = dumps(net, metadata)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".lfmw-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ContainerError(f"cannot read checkpoint {path}: {exc}") from exc
