"""Self-describing binary checkpoint container.

Layout::

    8 bytes   magic  b"ASSLCKPT"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length n, uint64 little-endian
    n bytes   UTF-8 JSON header (sorted keys): metadata plus an array index
    ...       raw array payloads, little-endian, row-major, in index order

Each index record is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` relative to the start of the payload section. Writing the same
content twice yields identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import PersistenceError

MAGIC = b"ASSLCKPT"
FORMAT_VERSION = 1
_DTYPES = {"<f4", "<f8", "<i8", "|u1", "|b1"}


def write_container(path: str | os.PathLike, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<", "=") else arr.dtype
        arr = arr.astype(dt, copy=False)
        code = arr.dtype.str
        if code not in _DTYPES:
            raise PersistenceError(f"array {name!r} has unsupported dtype {code}")
        data = arr.tobytes(order="C")
        index.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for data in blobs:
                fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise PersistenceError(f"{path} is not a checkpoint (bad magic {raw[:8]!r})")
    if len(raw) < 20:
        raise PersistenceError(f"{path} is truncated")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != FORMAT_VERSION:
        raise PersistenceError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise PersistenceError(f"{path}: corrupt header: {exc}") from exc
    base = 20 + hlen
    arrays = {}
    for rec in header["arrays"]:
        start = base + rec["offset"]
        end = start + rec["nbytes"]
        if end > len(raw) or rec["dtype"] not in _DTYPES:
            raise PersistenceError(f"{path}: array {rec['name']!r} is truncated or malformed")
        arrays[rec["name"]] = np.frombuffer(raw[start:end], dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy()
    return header["meta"], arrays
