"""Binary checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian float64 arrays at the offsets the header lists
(relative to the start of the data section).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .atomic import atomic_open
from .tensor import Tensor

MAGIC = b"DSKRNK\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Tensor], *, config: dict, ranker_kind: str | None = None,
                    vocab: list[str] | None = None, extra: dict | None = None) -> None:
    index, offset, blobs = [], 0, []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "ranker_kind": ranker_kind,
        "config": config,
        "params": index,
        "vocab": vocab,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with atomic_open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)

def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    """Return ``(params, header)``; all params come back with ``requires_grad=True``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    base = 16 + hlen
    params = {}
    for entry in header["params"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data[start:start + entry["nbytes"]], dtype="<f8").astype(np.float64)
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]), requires_grad=True)
    return params, header
