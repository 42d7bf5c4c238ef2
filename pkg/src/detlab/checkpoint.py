"""Weight serialization: a JSON manifest plus one raw float64 blob.

The manifest lists entries in save order as {name, shape, byte_offset};
the blob is each array in row-major order as little-endian float64,
concatenated in manifest order. Both files are written deterministically
so identical weights produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import UsageError

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


def save_checkpoint(named_arrays, directory):
    """Write `manifest.json` and `weights.bin` under `directory`.

    `named_arrays` is an ordered mapping or iterable of (name, array).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = named_arrays.items() if hasattr(named_arrays, "items") else named_arrays

    entries = []
    chunks = []
    offset = 0
    for name, array in items:
        arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes

    manifest = json.dumps({"entries": entries}, indent=2, sort_keys=True) + "\n"
    (directory / MANIFEST_NAME).write_text(manifest)
    (directory / WEIGHTS_NAME).write_bytes(b"".join(chunks))


def load_checkpoint(directory):
    """Read a checkpoint directory back into an ordered {name: array} dict."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    weights_path = directory / WEIGHTS_NAME
    if not manifest_path.is_file() or not weights_path.is_file():
        raise UsageError(f"no checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    blob = weights_path.read_bytes()

    out = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out
