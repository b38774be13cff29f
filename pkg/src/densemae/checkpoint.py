"""Checkpoint directory format: manifest.json + weights.bin.

weights.bin is the little-endian raw bytes of every entry concatenated in
manifest order. The manifest lists name, shape, dtype (numpy dtype string,
e.g. "<f4"), byte_offset and byte_length per entry, plus a free-form
config dict echoed back on load. Round-trips are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_state(path, entries, config: dict | None = None):
    """entries: iterable of (name, ndarray); order is preserved."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest_entries = []
    offset = 0
    blobs = []
    seen = set()
    for name, arr in entries:
        if name in seen:
            raise ValueError(f"duplicate state entry {name!r}")
        seen.add(name)
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        manifest_entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    with open(path / WEIGHTS_NAME, "wb") as f:
        for raw in blobs:
            f.write(raw)
    manifest = {"format": 1, "config": config or {}, "entries": manifest_entries}
    with open(path / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def load_state(path):
    """Returns (entries, config) with entries an insertion-ordered dict."""
    path = Path(path)
    with open(path / MANIFEST_NAME) as f:
        manifest = json.load(f)
    if manifest.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    raw = (path / WEIGHTS_NAME).read_bytes()
    entries = {}
    for e in manifest["entries"]:
        dt = np.dtype(e["dtype"])
        shape = tuple(e["shape"])
        expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if e["byte_length"] != expect:
            raise ValueError(f"entry {e['name']!r}: byte_length {e['byte_length']} != {expect}")
        lo, hi = e["byte_offset"], e["byte_offset"] + e["byte_length"]
        if hi > len(raw):
            raise ValueError(f"entry {e['name']!r} extends past end of weights.bin")
        entries[e["name"]] = np.frombuffer(raw[lo:hi], dtype=dt).reshape(shape).copy()
    return entries, manifest.get("config", {})
