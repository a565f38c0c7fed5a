"""Named-parameter checkpoint container.

Layout: 8-byte magic ``TESTRCKP``, little-endian u32 manifest length,
UTF-8 JSON manifest, then raw little-endian float32 payloads. The
manifest is ``{"config": <JSON or null>, "tensors": [{name, dtype,
shape, byte_offset}, ...]}`` with byte offsets relative to the start of
the payload region.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"TESTRCKP"


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_checkpoint(path, tensors, config=None):
    """Write named arrays (Tensor or ndarray) as an f32 checkpoint."""
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "byte_offset": offset,
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": config, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint, returning ``(dict name -> f32 ndarray, config)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: missing {MAGIC.decode()} magic")
    (mlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: invalid manifest JSON") from e
    payload = raw[12 + mlen:]
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor '{entry['name']}' exceeds payload")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return tensors, manifest.get("config")
