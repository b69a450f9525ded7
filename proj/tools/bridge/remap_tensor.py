"""Reader and writer for the feature files and manifests the engine consumes.

A feature exporter only needs `write_tensor` and `manifest_line`; everything
else is for inspection and tests.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RMAPTNSR"
VERSION = 1
HEADER = struct.Struct("<8s5I")  # magic, version, layer, width, height, depth


def write_tensor(path, activations, layer_id, check=True):
    """Write an (height, width, depth) array as little-endian f32."""
    arr = np.ascontiguousarray(activations, dtype="<f4")
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected a non-empty (height, width, depth) array, got shape {arr.shape}")
    if check and not np.isfinite(arr).all():
        raise ValueError("activations contain NaN or Inf")
    height, width, depth = arr.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, layer_id, width, height, depth))
        f.write(arr.tobytes())


def read_tensor(path):
    """Return (layer_id, array of shape (height, width, depth))."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, layer, width, height, depth = HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not a version {VERSION} tensor file")
    expected = HEADER.size + 4 * width * height * depth
    if len(raw) != expected:
        raise ValueError(f"{path}: {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(height, width, depth)
    return layer, arr


def manifest_line(image_id, feature_paths, class_id=None, is_query=False, relevant_ids=None, junk_ids=None,
                  in_database=True):
    """One JSON-lines manifest entry.

    feature_paths: {layer_id: path} for one input scale, or a list of such
    dicts, one per scale (the first is the primary scale).
    """
    def layer_map(paths):
        return {str(layer): str(p) for layer, p in sorted(paths.items())}

    entry = {"image_id": image_id}
    if isinstance(feature_paths, dict):
        entry["feature_paths"] = layer_map(feature_paths)
    else:
        entry["feature_paths"] = [layer_map(p) for p in feature_paths]
    if class_id is not None:
        entry["class_id"] = int(class_id)
    entry["is_query"] = bool(is_query)
    if is_query:
        entry["relevant_ids"] = list(relevant_ids or [])
        if junk_ids:
            entry["junk_ids"] = list(junk_ids)
    if not in_database:
        entry["in_database"] = False
    return json.dumps(entry, sort_keys=True)
