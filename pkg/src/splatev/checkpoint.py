"""Self-describing binary container for cloud and trainer checkpoints.

Layout (all little-endian):

    8 bytes   magic  b"SPLTCNT\\0"
    u32       format version (currently 1)
    u32       entry count
    per entry:
        u16   name length, then UTF-8 name
        u8    kind: 0 = ndarray, 1 = JSON blob
        ndarray: u16 dtype-string length + dtype string (numpy ".str"),
                 u8 ndim, ndim * u64 shape, u64 payload bytes, payload
        json:    u64 payload bytes, UTF-8 payload

Writes are byte-deterministic for identical inputs (entries are stored in
sorted name order, no timestamps), so checkpoint hashes are reproducible.
Files are written to a temp path and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .scene import GaussianCloud

MAGIC = b"SPLTCNT\0"
FORMAT_VERSION = 1


def write_container(path, arrays: dict, meta: dict | None = None) -> None:
    entries = dict(arrays)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries) + (1 if meta is not None else 0))]
    names = sorted(entries)
    for name in names:
        arr = np.ascontiguousarray(entries[name])
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + b"\x00")
        dt = arr.dtype.str.encode("ascii")
        chunks.append(struct.pack("<H", len(dt)) + dt)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        payload = arr.tobytes()
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    if meta is not None:
        nb = b"__meta__"
        payload = json.dumps(meta, sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + b"\x01")
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: bad magic, not a splatev container")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = 16
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        kind = raw[off]
        off += 1
        if kind == 0:
            (dlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            dtype = np.dtype(raw[off : off + dlen].decode("ascii"))
            off += dlen
            ndim = raw[off]
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, off) if ndim else ()
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, off)
            off += 8
            arrays[name] = np.frombuffer(
                raw[off : off + nbytes], dtype=dtype
            ).reshape(shape).copy()
            off += nbytes
        elif kind == 1:
            (nbytes,) = struct.unpack_from("<Q", raw, off)
            off += 8
            meta = json.loads(raw[off : off + nbytes].decode("utf-8"))
            off += nbytes
        else:
            raise DataError(f"{path}: unknown entry kind {kind}")
    return arrays, meta


def save_cloud(cloud: GaussianCloud, path) -> None:
    write_container(
        path,
        arrays={
            "means": cloud.means,
            "log_scales": cloud.log_scales,
            "rotations": cloud.rotations,
            "opacity_logits": cloud.opacity_logits,
            "sh_coeffs": cloud.sh_coeffs,
            "background": cloud.background,
        },
        meta={"kind": "cloud", "sh_degree": cloud.sh_degree},
    )


def load_cloud(path) -> GaussianCloud:
    arrays, meta = read_container(path)
    if meta.get("kind") not in ("cloud", "train_state"):
        raise DataError(f"{path}: container does not hold a cloud")
    return GaussianCloud(
        means=arrays["means"],
        log_scales=arrays["log_scales"],
        rotations=arrays["rotations"],
        opacity_logits=arrays["opacity_logits"],
        sh_coeffs=arrays["sh_coeffs"],
        sh_degree=int(meta["sh_degree"]),
        background=arrays["background"],
    )
