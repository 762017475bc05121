"""Versioned binary checkpoint container.

Layout::

    b"MVCLCKPT" | uint32 format_version | uint64 header_len | header (JSON) | array blobs

The header is canonical JSON (sorted keys) describing every array's dtype,
shape and byte offset, so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MVCLCKPT"
FORMAT_VERSION = 1


def dumps(header, arrays):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = dict(header)
    meta["format_version"] = FORMAT_VERSION
    meta["arrays"] = entries
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def loads(data):
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    header = json.loads(data[20:20 + head_len])
    base = 20 + head_len
    arrays = {}
    for e in header.pop("arrays"):
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def save(path, header, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(header, arrays))
    tmp.replace(path)


def load(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    return loads(path.read_bytes())


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def arrays_hash(arrays, prefixes=None):
    h = hashlib.sha256()
    for name in sorted(arrays):
        if prefixes is not None and not name.startswith(tuple(prefixes)):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()
