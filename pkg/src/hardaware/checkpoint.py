"""Checkpoint serialization: a JSON manifest plus a binary parameter blob.

The manifest lists every array's name, shape, and byte offset into the
companion blob of little-endian float64 values, stored in manifest order.
Arbitrary JSON metadata (configs, registry state, counters) rides along in
the manifest's ``meta`` field. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
FORMAT_TAG = "hardaware-checkpoint-v1"


def save_checkpoint(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` (in insertion order) and ``meta`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {"format": FORMAT_TAG, "params": entries, "meta": meta or {}}
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=False))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back arrays (manifest order) and metadata."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise FormatError(f"unrecognized checkpoint format tag {manifest.get('format')!r}")
    blob = (directory / BLOB_NAME).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(blob):
            raise FormatError(
                f"checkpoint blob truncated: {entry['name']} needs bytes [{start}, {end}) of {len(blob)}"
            )
        arr = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64).copy()
    return arrays, manifest.get("meta", {})
