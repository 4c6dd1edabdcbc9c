"""Writer for the PEFG feature-grid interchange format and its companions.

This is the exporter side of the file contract consumed by the analysis
package; the byte layout is mirrored in that repo's docs/FORMATS.md and must
not drift. Header: magic "PEFG", then 12 little-endian u32 fields (version,
layer_index, grid_h, grid_w, dim, patch_size, orig_h, orig_w, pad_top,
pad_left, pad_bottom, pad_right), then grid_h*grid_w*dim little-endian f32
in row-major [row][col][channel] order.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"PEFG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s12I")
HEADER_SIZE = _HEADER.size


def write_grid(path, data, layer_index, patch_size, orig_hw, pad=(0, 0, 0, 0)):
    """Write one (grid_h, grid_w, dim) float array as a PEFG file.

    ``pad`` is (top, left, bottom, right) pixels added before the backbone;
    geometry must satisfy grid * patch_size == orig + opposing pads.
    """
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise ValueError(f"feature grid must be 3-d, got shape {data.shape}")
    grid_h, grid_w, dim = data.shape
    orig_h, orig_w = orig_hw
    top, left, bottom, right = pad
    if grid_h * patch_size != orig_h + top + bottom or \
            grid_w * patch_size != orig_w + left + right:
        raise ValueError(
            f"geometry mismatch: grid {grid_h}x{grid_w} * P={patch_size} vs "
            f"orig {orig_h}x{orig_w} with pad {pad}"
        )
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite feature values")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, layer_index, grid_h, grid_w,
                          dim, patch_size, orig_h, orig_w, top, left, bottom, right)
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def read_grid(path):
    """Minimal reader used by the format self-test; returns (header dict, data)."""
    with open(path, "rb") as f:
        fields = _HEADER.unpack(f.read(HEADER_SIZE))
        magic, version, layer_index, grid_h, grid_w, dim, patch_size, \
            orig_h, orig_w, top, left, bottom, right = fields
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(grid_h * grid_w * dim * 4),
                             dtype="<f4").reshape(grid_h, grid_w, dim)
    header = dict(layer_index=layer_index, grid_h=grid_h, grid_w=grid_w,
                  dim=dim, patch_size=patch_size, orig_h=orig_h, orig_w=orig_w,
                  pad=(top, left, bottom, right))
    return header, data


def write_manifest(path, dataset_name, layer_pair, samples):
    """Write the JSON manifest; ``samples`` entries already carry paths
    relative to the manifest's directory."""
    doc = {
        "dataset_name": dataset_name,
        "layer_pair": list(layer_pair),
        "samples": samples,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def sample_entry(sample_id, category, split, label, feature_paths, mask_path,
                 image_dims):
    return {
        "sample_id": sample_id,
        "category": category,
        "split": split,
        "label": label,
        "feature_paths": {str(k): v for k, v in feature_paths.items()},
        "mask_path": mask_path,
        "image_dims": list(image_dims),
    }
