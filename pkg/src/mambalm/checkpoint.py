"""Binary checkpoint container.

Layout::

    b"FMLB1\\n"
    <manifest length as decimal ASCII> b"\\n"
    <UTF-8 JSON manifest>
    <array section: raw little-endian IEEE-754 arrays, back to back>
    <64-bit FNV-1a hash of the array section, little-endian>

The manifest lists each array's name, shape, dtype and byte offset within the
array section, plus free-form ``meta`` (config, counters, RNG state).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMLB1\n"
VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF
_DTYPES = {"<f8": np.float64, "<f4": np.float32}


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def save_checkpoint(path, arrays: dict, meta: dict | None = None, single_precision: bool = False) -> None:
    """Write ``arrays`` (name -> ndarray) and JSON-serialisable ``meta`` atomically."""
    dtype = "<f4" if single_precision else "<f8"
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_DTYPES[dtype]).astype(dtype, copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    section = b"".join(chunks)
    manifest = json.dumps({"version": VERSION, "arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(manifest)}\n".encode("ascii"))
        fh.write(manifest)
        fh.write(section)
        fh.write(struct.pack("<Q", fnv1a64(section)))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``. Raises on bad magic, version or hash."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CorruptCheckpoint(f"{path}: bad magic")
    pos = len(MAGIC)
    nl = blob.find(b"\n", pos)
    if nl < 0:
        raise CorruptCheckpoint(f"{path}: missing manifest length")
    try:
        mlen = int(blob[pos:nl].decode("ascii"))
        manifest = json.loads(blob[nl + 1 : nl + 1 + mlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {manifest.get('version')}, expected {VERSION}")
    start = nl + 1 + mlen
    total = sum(e["nbytes"] for e in manifest["arrays"])
    if len(blob) != start + total + 8:
        raise CorruptCheckpoint(f"{path}: size mismatch (truncated or padded file)")
    section = blob[start : start + total]
    (stored,) = struct.unpack("<Q", blob[start + total :])
    if fnv1a64(section) != stored:
        raise CorruptCheckpoint(f"{path}: array section hash mismatch")
    arrays = {}
    for e in manifest["arrays"]:
        if e["dtype"] not in _DTYPES:
            raise CorruptCheckpoint(f"{path}: unsupported dtype {e['dtype']}")
        raw = section[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["meta"]
