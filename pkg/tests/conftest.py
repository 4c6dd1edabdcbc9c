import os

import numpy as np
import pytest
from PIL import Image

from patchmimic.feature_store import (
    FeatureGrid,
    Manifest,
    SampleRecord,
    save_manifest,
    write_feature_grid,
)

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures", "synthetic")
FIXTURE_MANIFEST = os.path.join(FIXTURE_DIR, "manifest.json")


def make_grid(grid_h=4, grid_w=4, dim=3, patch_size=2, pad=(0, 0, 0, 0),
              layer_index=8, data=None, rng=None):
    orig_h = grid_h * patch_size - pad[0] - pad[2]
    orig_w = grid_w * patch_size - pad[1] - pad[3]
    if data is None:
        rng = rng or np.random.default_rng(0)
        data = rng.normal(size=(grid_h, grid_w, dim)).astype(np.float32)
    return FeatureGrid(layer_index=layer_index, grid_h=grid_h, grid_w=grid_w,
                       dim=dim, patch_size=patch_size, orig_h=orig_h,
                       orig_w=orig_w, pad=pad, data=data)


def write_mask_png(path, mask):
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255)).save(path)


@pytest.fixture
def tiny_dataset(tmp_path):
    """A 2-sample on-disk dataset: one nominal train, one anomalous test."""
    rng = np.random.default_rng(7)
    records = []
    for sample_id, split, label in [("train_000", "train", "nominal"),
                                    ("test_000", "test", "anomalous")]:
        paths = {}
        for layer in (8, 12):
            grid = make_grid(layer_index=layer, rng=rng)
            p = tmp_path / f"{sample_id}_l{layer}.pefg"
            write_feature_grid(grid, p)
            paths[layer] = str(p)
        mask_path = None
        if label == "anomalous":
            mask = np.zeros((8, 8), dtype=bool)
            mask[2:4, 2:5] = True
            mask_path = str(tmp_path / f"{sample_id}_mask.png")
            write_mask_png(mask_path, mask)
        records.append(SampleRecord(sample_id=sample_id, category="widget",
                                    split=split, label=label,
                                    feature_paths=paths, mask_path=mask_path,
                                    image_dims=(8, 8)))
    manifest = Manifest(dataset_name="tiny", layer_pair=(8, 12), samples=records)
    manifest_path = tmp_path / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
