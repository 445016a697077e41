"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"ICONVCK\\0"
    8       4     format version (uint32, currently 1)
    12      8     header length H (uint64)
    20      H     UTF-8 JSON header
    20+H    ...   tensor payload, tensors back to back in header order
    end-4   4     CRC-32 of every preceding byte (uint32)

The JSON header holds ``meta`` (free-form: config echo, step, RNG state,
optimizer counters) and ``tensors``: a list of ``{name, dtype, shape,
offset, nbytes}`` with offsets relative to the payload start.  Tensor data is
raw row-major little-endian (``<f4`` / ``<f8``), so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"ICONVCK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    """Corrupt, truncated or incompatible checkpoint."""


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)  # not ascontiguousarray: that promotes 0-d to 1-d
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", crc))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises CheckpointError on any inconsistency."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size + 4:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = memoryview(data)[start + hlen : len(data) - 4]
    tensors = {}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[lo : lo + n], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]
