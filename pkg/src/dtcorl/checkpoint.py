"""Binary parameter files: magic, version, JSON config block, named float64 arrays.

Layout (little-endian):
    4s magic | u32 version | u32 config length | config JSON (utf-8)
    u32 n_arrays | per array: u16 name length, name, u8 ndim, u32 * ndim shape, f64 data
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile

import numpy as np

VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(magic: bytes, config: dict, arrays: dict) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True).encode()
    buf.write(struct.pack("<4sII", magic, VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def unpack(magic: bytes, payload: bytes) -> tuple[dict, dict]:
    fh = io.BytesIO(payload)
    head = fh.read(12)
    if len(head) < 12:
        raise ValueError("truncated checkpoint")
    got, version, n_cfg = struct.unpack("<4sII", head)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = json.loads(fh.read(n_cfg).decode())
    (n,) = struct.unpack("<I", fh.read(4))
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", fh.read(2))
        name = fh.read(ln).decode()
        (nd,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{nd}I", fh.read(4 * nd))
        count = int(np.prod(shape)) if nd else 1
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError("truncated checkpoint")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return config, arrays


def save(path, magic: bytes, config: dict, arrays: dict) -> None:
    atomic_write_bytes(path, pack(magic, config, arrays))


def load(path, magic: bytes) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return unpack(magic, fh.read())
