"""Checkpoint persistence: named tensors in one little-endian binary blob.

Layout: 8-byte little-endian header length, then a UTF-8 JSON header listing
(name, shape, dtype, byte offset) per tensor, then the raw payload.
"""

import json
import struct

import numpy as np

from .tensor import Tensor

_DTYPE_TAGS = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path, tensors):
    """Write a {name: Tensor|ndarray} mapping to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else np.asarray(t))
        tag = _DTYPE_TAGS.get(arr.dtype.name)
        if tag is None:
            raise ValueError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(tag).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read a checkpoint back as {name: ndarray}."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    out = {}
    for e in header["tensors"]:
        tag = _DTYPE_TAGS[e["dtype"]]
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype=tag, count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"]).copy()
    return out
