"""Bit-exact parameter persistence: JSON manifest + little-endian f64 blob."""

from __future__ import annotations

import json
import os

import numpy as np


def save_checkpoint(manifest_path: str, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> str:
    """Write `arrays` to `<manifest_path>` plus a sidecar `.bin` blob.

    The manifest lists one {name, shape, dtype, offset, length} entry per
    array, in dict order; the blob is their little-endian float64 bytes
    concatenated at the listed offsets. Returns the blob path.
    """
    if not manifest_path.endswith(".json"):
        raise ValueError(f"manifest path must end in .json, got {manifest_path!r}")
    blob_path = manifest_path[: -len(".json")] + ".bin"
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")  # asarray keeps 0-d shapes intact
        raw = a.tobytes()
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "dtype": "f64",
            "offset": offset,
            "length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "blob": os.path.basename(blob_path),
        "tensors": entries,
        "meta": meta or {},
    }
    with open(blob_path, "wb") as f:
        f.write(b"".join(chunks))
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return blob_path


def load_checkpoint(manifest_path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read back arrays and metadata written by save_checkpoint, bit-exact."""
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    blob_path = os.path.join(os.path.dirname(manifest_path) or ".", manifest["blob"])
    with open(blob_path, "rb") as f:
        blob = f.read()
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f64":
            raise ValueError(f"tensor {e['name']!r} has unsupported dtype {e['dtype']!r}")
        end = e["offset"] + e["length"]
        if end > len(blob):
            raise ValueError(
                f"tensor {e['name']!r} extends to byte {end} but blob has {len(blob)}")
        n = e["length"] // 8
        if n * 8 != e["length"] or n != int(np.prod(e["shape"], dtype=np.int64)):
            raise ValueError(f"tensor {e['name']!r} length does not match its shape")
        flat = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        arrays[e["name"]] = flat.reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})
