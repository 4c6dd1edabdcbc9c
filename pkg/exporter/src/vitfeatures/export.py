"""Dataset export: run the frozen backbone over an MVTec-style tree and write
feature grids, byte-identical mask copies, and a manifest.

Expected layout (the VisA preparation scripts produce the same structure):

    root/<category>/train/good/*.png
    root/<category>/test/<defect-or-good>/*.png
    root/<category>/ground_truth/<defect>/<stem>_mask.png

Images are resized so their long side matches the target, reflect-padded to
the next multiple of the patch size (amounts recorded in the feature headers),
and normalized with the backbone's pretraining statistics. Ground-truth masks
are copied untouched at original resolution.
"""

from __future__ import annotations

import os
import shutil
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .pefg import sample_entry, write_grid, write_manifest
from .vit import IMAGENET_MEAN, IMAGENET_STD, build_backbone

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ExportConfig:
    dataset_root: str
    out_dir: str
    backbone: str = "dinov2_vitb14"
    weights: str | None = None
    random_weights: bool = False
    target_side: int = 1036
    layers: tuple[int, ...] = (8, 12)
    categories: tuple[str, ...] | None = None
    device: str = "cpu"
    seed: int = 0


def preprocess(image: Image.Image, target_side: int, patch_size: int):
    """Resize long side to the target, reflect-pad to patch multiples.

    Returns (chw gray-normalized tensor-ready array, resized (h, w),
    pad (top, left, bottom, right)).
    """
    image = image.convert("RGB")
    w0, h0 = image.size
    scale = target_side / max(w0, h0)
    rw, rh = max(1, round(w0 * scale)), max(1, round(h0 * scale))
    image = image.resize((rw, rh), Image.BILINEAR)

    pad_h = (-rh) % patch_size
    pad_w = (-rw) % patch_size
    top, left = pad_h // 2, pad_w // 2
    bottom, right = pad_h - top, pad_w - left

    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = np.pad(arr, ((top, bottom), (left, right), (0, 0)), mode="reflect")
    arr = (arr - np.array(IMAGENET_MEAN, dtype=np.float32)) \
        / np.array(IMAGENET_STD, dtype=np.float32)
    return arr.transpose(2, 0, 1), (rh, rw), (top, left, bottom, right)


def _walk_category(root, category):
    """Yield (split, label, defect, image_path, mask_path) for one category."""
    cat_dir = os.path.join(root, category)
    train_good = os.path.join(cat_dir, "train", "good")
    if not os.path.isdir(train_good):
        raise FileNotFoundError(f"{train_good} not found: not an MVTec-style tree")
    for name in sorted(os.listdir(train_good)):
        if name.lower().endswith(IMAGE_EXTENSIONS):
            yield "train", "nominal", "good", os.path.join(train_good, name), None
    test_dir = os.path.join(cat_dir, "test")
    for defect in sorted(os.listdir(test_dir)):
        defect_dir = os.path.join(test_dir, defect)
        if not os.path.isdir(defect_dir):
            continue
        for name in sorted(os.listdir(defect_dir)):
            if not name.lower().endswith(IMAGE_EXTENSIONS):
                continue
            image_path = os.path.join(defect_dir, name)
            if defect == "good":
                yield "test", "nominal", defect, image_path, None
            else:
                stem = os.path.splitext(name)[0]
                mask_dir = os.path.join(cat_dir, "ground_truth", defect)
                candidates = [os.path.join(mask_dir, f"{stem}_mask.png"),
                              os.path.join(mask_dir, f"{stem}.png")]
                mask_path = next((c for c in candidates if os.path.isfile(c)), None)
                if mask_path is None:
                    raise FileNotFoundError(
                        f"no ground-truth mask for {image_path} "
                        f"(tried {candidates})")
                yield "test", "anomalous", defect, image_path, mask_path


def export_image(model, image: Image.Image, layers, target_side, device="cpu"):
    """Features for one image: {layer: (gh, gw, D) float32}, resized dims, pad."""
    patch_size = model.spec.patch_size
    chw, resized_hw, pad = preprocess(image, target_side, patch_size)
    x = torch.from_numpy(chw[None]).to(device)
    with torch.no_grad():
        taps = model.forward_features(x, layers)
    feats = {layer: taps[layer][0].cpu().numpy().astype(np.float32)
             for layer in layers}
    return feats, resized_hw, pad


def export_dataset(config: ExportConfig) -> str:
    """Export every image of every category; returns the manifest path."""
    layers = tuple(sorted(config.layers))
    model = build_backbone(config.backbone, weights=config.weights,
                           random_weights=config.random_weights,
                           seed=config.seed).to(config.device)

    categories = config.categories
    if categories is None:
        categories = tuple(sorted(
            d for d in os.listdir(config.dataset_root)
            if os.path.isdir(os.path.join(config.dataset_root, d, "train"))))
    if not categories:
        raise FileNotFoundError(
            f"no MVTec-style categories under {config.dataset_root}")

    os.makedirs(config.out_dir, exist_ok=True)
    entries = []
    for category in categories:
        feat_dir = os.path.join(config.out_dir, category, "features")
        mask_dir = os.path.join(config.out_dir, category, "masks")
        os.makedirs(feat_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
        for split, label, defect, image_path, mask_path in \
                _walk_category(config.dataset_root, category):
            stem = os.path.splitext(os.path.basename(image_path))[0]
            sample_id = f"{category}/{split}/{defect}/{stem}"
            with Image.open(image_path) as img:
                orig_w, orig_h = img.size
                feats, resized_hw, pad = export_image(
                    model, img, layers, config.target_side, config.device)

            rel_paths = {}
            for layer, grid in feats.items():
                rel = os.path.join(category, "features",
                                   f"{split}_{defect}_{stem}_l{layer:02d}.pefg")
                write_grid(os.path.join(config.out_dir, rel), grid, layer,
                           model.spec.patch_size, resized_hw, pad)
                rel_paths[layer] = rel

            mask_rel = None
            if mask_path is not None:
                mask_rel = os.path.join(category, "masks",
                                        f"{defect}_{os.path.basename(mask_path)}")
                shutil.copyfile(mask_path, os.path.join(config.out_dir, mask_rel))

            entries.append(sample_entry(
                sample_id, category, split, label, rel_paths, mask_rel,
                (orig_h, orig_w)))

    manifest_path = os.path.join(config.out_dir, "manifest.json")
    dataset_name = os.path.basename(os.path.normpath(config.dataset_root))
    layer_pair = layers[:2] if len(layers) >= 2 else (layers[0], layers[0] + 1)
    write_manifest(manifest_path, dataset_name, layer_pair, entries)
    return manifest_path
