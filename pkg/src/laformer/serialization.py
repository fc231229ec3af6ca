"""Tensor container files.

Layout::

    b"LAFT" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | data blob

The manifest lists every tensor as ``{name, shape, dtype, offset, nbytes}``
with offsets relative to the start of the blob; data is little-endian,
row-major. Free-form metadata (model config, step counter) rides along under
``"metadata"``; ``"crc32"`` covers the blob.
"""
import json
import struct
import zlib

import numpy as np

MAGIC = b"LAFT"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors, metadata=None):
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"format": "laformer-tensors", "tensors": entries,
                "metadata": metadata or {}, "blob_bytes": len(blob),
                "crc32": zlib.crc32(blob)}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        fh.write(blob)


def load_tensors(path):
    """Returns ``(tensors, metadata)``; raises CheckpointError on any corruption."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    blob = data[start:]
    if len(blob) != manifest.get("blob_bytes"):
        raise CheckpointError(
            f"{path}: truncated data blob ({len(blob)} of {manifest.get('blob_bytes')} bytes)")
    if zlib.crc32(blob) != manifest.get("crc32"):
        raise CheckpointError(f"{path}: data checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"{path}: tensor {e['name']!r} has inconsistent extent")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        tensors[e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
    return tensors, manifest.get("metadata", {})
