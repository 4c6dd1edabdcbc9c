"""On-disk representation of patch-embedding grids, masks, and dataset manifests.

The feature file format ("PEFG") is the contract between this package and any
external feature exporter; the byte layout is documented in docs/FORMATS.md and
enforced bit-exactly here. All readers validate eagerly so that downstream
training/inference never sees an inconsistent record.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .errors import DataError, FeatureFormatError, ManifestError

MAGIC = b"PEFG"
FORMAT_VERSION = 1

# magic, then 12 little-endian u32 fields: version, layer_index, grid_h, grid_w,
# dim, patch_size, orig_h, orig_w, pad_top, pad_left, pad_bottom, pad_right
_HEADER = struct.Struct("<4s12I")
HEADER_SIZE = _HEADER.size  # 52 bytes: 4-byte magic + 48 bytes of fields

SPLITS = ("train", "test")
LABELS = ("nominal", "anomalous")


@dataclass
class FeatureGrid:
    """One image's patch-embedding tensor at one backbone layer.

    ``pad`` is (top, left, bottom, right) in pixels, added to the original
    image before the backbone ran; ``data`` has shape (grid_h, grid_w, dim)
    and dtype float32.
    """

    layer_index: int
    grid_h: int
    grid_w: int
    dim: int
    patch_size: int
    orig_h: int
    orig_w: int
    pad: tuple[int, int, int, int]
    data: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def padded_hw(self) -> tuple[int, int]:
        return (self.grid_h * self.patch_size, self.grid_w * self.patch_size)

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.dim < 1 or self.patch_size < 1:
            raise FeatureFormatError(
                f"invalid geometry: grid {self.grid_h}x{self.grid_w}, dim {self.dim}, "
                f"patch_size {self.patch_size}"
            )
        if len(self.pad) != 4 or any(p < 0 for p in self.pad):
            raise FeatureFormatError(f"invalid pad {self.pad!r}")
        top, left, bottom, right = self.pad
        if self.grid_h * self.patch_size != self.orig_h + top + bottom:
            raise FeatureFormatError(
                f"pad/geometry inconsistency: grid_h*patch_size = {self.grid_h * self.patch_size} "
                f"but orig_h + pad_top + pad_bottom = {self.orig_h + top + bottom}"
            )
        if self.grid_w * self.patch_size != self.orig_w + left + right:
            raise FeatureFormatError(
                f"pad/geometry inconsistency: grid_w*patch_size = {self.grid_w * self.patch_size} "
                f"but orig_w + pad_left + pad_right = {self.orig_w + left + right}"
            )
        if self.data.shape != (self.grid_h, self.grid_w, self.dim):
            raise FeatureFormatError(
                f"data shape {self.data.shape} does not match header "
                f"({self.grid_h}, {self.grid_w}, {self.dim})"
            )
        if not np.isfinite(self.data).all():
            raise FeatureFormatError("non-finite values in feature data")


def write_feature_grid(grid: FeatureGrid, path: str | os.PathLike) -> None:
    """Write ``grid`` in the PEFG format. Rejects invalid grids before writing."""
    grid.validate()
    top, left, bottom, right = grid.pad
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, grid.layer_index, grid.grid_h, grid.grid_w,
        grid.dim, grid.patch_size, grid.orig_h, grid.orig_w,
        top, left, bottom, right,
    )
    payload = np.ascontiguousarray(grid.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_feature_grid(path: str | os.PathLike) -> FeatureGrid:
    """Read and fully validate a PEFG file; raises FeatureFormatError on any defect."""
    with open(path, "rb") as f:
        header = f.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise FeatureFormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, version, layer_index, grid_h, grid_w, dim, patch_size, \
            orig_h, orig_w, top, left, bottom, right = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FeatureFormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FeatureFormatError(f"{path}: unsupported format version {version}")
        expected = grid_h * grid_w * dim * 4
        raw = f.read(expected)
        if len(raw) < expected:
            raise FeatureFormatError(
                f"{path}: truncated payload ({len(raw)} of {expected} bytes)"
            )
        if f.read(1):
            raise FeatureFormatError(f"{path}: trailing data after payload")
    data = np.frombuffer(raw, dtype="<f4").reshape(grid_h, grid_w, dim)
    grid = FeatureGrid(
        layer_index=layer_index, grid_h=grid_h, grid_w=grid_w, dim=dim,
        patch_size=patch_size, orig_h=orig_h, orig_w=orig_w,
        pad=(top, left, bottom, right), data=data,
    )
    grid.validate()
    return grid


@dataclass
class SampleRecord:
    """One dataset image: its split/label, per-layer feature files, optional mask."""

    sample_id: str
    category: str
    split: str
    label: str
    feature_paths: dict[int, str]
    mask_path: str | None
    image_dims: tuple[int, int]  # (orig_h, orig_w)

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass
class Manifest:
    dataset_name: str
    layer_pair: tuple[int, int]
    samples: list[SampleRecord] = field(default_factory=list)

    def train_samples(self) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == "train"]

    def test_samples(self) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == "test"]

    def categories(self) -> list[str]:
        return sorted({s.category for s in self.samples})


def _validate_records(samples: list[SampleRecord]) -> list[str]:
    """Collect every invariant violation instead of stopping at the first."""
    problems = []
    seen_ids = set()
    for s in samples:
        tag = f"sample '{s.sample_id}'"
        if s.sample_id in seen_ids:
            problems.append(f"{tag}: duplicate sample_id")
        seen_ids.add(s.sample_id)
        if s.split not in SPLITS:
            problems.append(f"{tag}: unknown split '{s.split}'")
        if s.label not in LABELS:
            problems.append(f"{tag}: unknown label '{s.label}'")
        if s.split == "train" and s.label == "anomalous":
            problems.append(f"{tag}: train split must contain only nominal samples")
        if s.is_anomalous and not s.mask_path:
            problems.append(f"{tag}: anomalous sample without a mask")
        if not s.is_anomalous and s.mask_path:
            problems.append(f"{tag}: nominal sample must not carry a mask")
        if len(s.image_dims) != 2 or any(d < 1 for d in s.image_dims):
            problems.append(f"{tag}: invalid image_dims {s.image_dims!r}")
        if not s.feature_paths:
            problems.append(f"{tag}: no feature files listed")
        for layer, fpath in s.feature_paths.items():
            if not os.path.isfile(fpath):
                problems.append(f"{tag}: missing feature file for layer {layer}: {fpath}")
        if s.mask_path:
            if not os.path.isfile(s.mask_path):
                problems.append(f"{tag}: missing mask file: {s.mask_path}")
            else:
                with Image.open(s.mask_path) as img:
                    w, h = img.size
                if (h, w) != tuple(s.image_dims):
                    problems.append(
                        f"{tag}: mask is {h}x{w} but image_dims is "
                        f"{s.image_dims[0]}x{s.image_dims[1]}"
                    )
    return problems


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Load a JSON manifest, resolving relative paths against its directory.

    Validation is eager and total: the returned manifest satisfies every
    record invariant, and a ManifestError lists all violations at once.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return os.path.normpath(os.path.join(base, p))

    try:
        pair = tuple(int(x) for x in doc["layer_pair"])
        samples = []
        for rec in doc["samples"]:
            samples.append(SampleRecord(
                sample_id=str(rec["sample_id"]),
                category=str(rec["category"]),
                split=str(rec["split"]),
                label=str(rec["label"]),
                feature_paths={int(k): resolve(v) for k, v in rec["feature_paths"].items()},
                mask_path=resolve(rec["mask_path"]) if rec.get("mask_path") else None,
                image_dims=tuple(int(d) for d in rec["image_dims"]),
            ))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed manifest {path}: {e}") from e
    if len(pair) != 2:
        raise DataError(f"malformed manifest {path}: layer_pair must have two entries")

    manifest = Manifest(dataset_name=str(doc.get("dataset_name", "")),
                        layer_pair=pair, samples=samples)
    problems = _validate_records(manifest.samples)
    if problems:
        raise ManifestError(problems)
    return manifest


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    """Write a manifest as JSON with paths relative to the target directory."""
    base = os.path.dirname(os.path.abspath(path))

    def rel(p):
        return os.path.relpath(p, base)

    doc = {
        "dataset_name": manifest.dataset_name,
        "layer_pair": list(manifest.layer_pair),
        "samples": [
            {
                "sample_id": s.sample_id,
                "category": s.category,
                "split": s.split,
                "label": s.label,
                "feature_paths": {str(k): rel(v) for k, v in s.feature_paths.items()},
                "mask_path": rel(s.mask_path) if s.mask_path else None,
                "image_dims": list(s.image_dims),
            }
            for s in manifest.samples
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_mask(path: str | os.PathLike, expected_dims: tuple[int, int]) -> np.ndarray:
    """Read an 8-bit grayscale mask; anomalous wherever the stored value > 0.

    ``expected_dims`` is (h, w) at the ORIGINAL image resolution; masks are
    never resampled, so any dimension mismatch signals an exporter bug.
    """
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(f"{path}: unsupported mask mode '{img.mode}' (need 8-bit grayscale)")
        arr = np.asarray(img)
    if arr.shape != tuple(expected_dims):
        raise DataError(
            f"{path}: mask is {arr.shape[0]}x{arr.shape[1]} but expected "
            f"{expected_dims[0]}x{expected_dims[1]}"
        )
    return arr > 0


def sample_fewshot(manifest: Manifest, shots: int, seed: int) -> Manifest:
    """Keep all test samples; per category, keep exactly ``shots`` train samples
    chosen uniformly without replacement. Deterministic for a fixed seed."""
    if shots < 1:
        raise DataError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    by_category: dict[str, list[SampleRecord]] = {}
    for s in manifest.train_samples():
        by_category.setdefault(s.category, []).append(s)

    keep_ids = set()
    for category in sorted(by_category):
        pool = by_category[category]
        if len(pool) < shots:
            raise DataError(
                f"category '{category}' has only {len(pool)} train samples, need {shots}"
            )
        chosen = rng.choice(len(pool), size=shots, replace=False)
        keep_ids.update(pool[i].sample_id for i in chosen)

    samples = [s for s in manifest.samples
               if s.split == "test" or s.sample_id in keep_ids]
    return replace(manifest, samples=samples)
