"""Self-describing binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 manifest length, JSON
manifest, raw little-endian array payload.  The manifest lists every array
(name, dtype, shape, offset, nbytes) plus a free-form JSON ``meta`` dict.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CONVTTS\x00"
VERSION = 1

_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


def write_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named arrays plus a JSON metadata dict."""
    records = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        records.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    manifest = json.dumps({"arrays": records, "meta": meta or {}},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(bytes(payload))


def read_checkpoint(path):
    """Return (arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CheckpointError(f"{path}: truncated header")
        magic, version, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for rec in manifest["arrays"]:
        start, n = rec["offset"], rec["nbytes"]
        buf = payload[start : start + n]
        if len(buf) != n:
            raise CheckpointError(f"{path}: truncated payload for {rec['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, manifest["meta"]
