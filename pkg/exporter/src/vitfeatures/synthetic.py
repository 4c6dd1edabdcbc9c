"""Synthetic feature-pair generator: a toy stand-in for the frozen backbone.

Shallow-layer features live on a smooth low-dimensional nominal manifold; the
deep-layer features are a fixed random nonlinear map of them. Anomalous test
samples perturb a localized patch block in both layers so the nominal
relation breaks there in both mapping directions, and test samples of either
label carry sparse single-layer speckles that only one direction can flag.
Output files use the same formats as real exports, so downstream training,
inference, and metrics run without any ML dependency.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .pefg import sample_entry, write_grid, write_manifest


@dataclass
class SynthConfig:
    out_dir: str
    seed: int = 0
    grid: int = 16
    dim: int = 32
    patch_size: int = 4
    pad: int = 2  # uniform border, pixels
    latent_dim: int = 4
    layer_pair: tuple[int, int] = (8, 12)
    categories: tuple[str, ...] = ("camA", "camB")
    train_per_category: int = 20
    nominal_test_per_category: int = 10
    anomalous_test_per_category: int = 10
    feature_norm: float = 3.0  # per-patch embedding norm, both layers
    obs_noise: float = 0.02
    speckle_patches: int = 3
    speckle_mag: float = 0.8
    anomaly_mag: float = 2.5
    block_range: tuple[int, int] = (2, 6)  # patch-block side, inclusive


class _TeacherSim:
    """Fixed random maps latent->shallow and shallow->deep, seeded once.

    The deep map is rotation + a moderate tanh residual, so it stays smoothly
    invertible on the manifold and both mapping directions are learnable.
    """

    def __init__(self, rng, latent_dim, dim):
        width = 2 * dim
        self.a0 = rng.normal(scale=1.0, size=(latent_dim, width))
        self.b0 = rng.normal(scale=0.3, size=width)
        self.a1 = rng.normal(scale=1.0 / np.sqrt(width), size=(width, dim))
        self.rot = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
        self.c0 = rng.normal(scale=1.0 / np.sqrt(dim), size=(dim, width))
        self.d0 = rng.normal(scale=0.3, size=width)
        self.c1 = rng.normal(scale=1.0 / np.sqrt(width), size=(width, dim))
        self.c2 = rng.normal(scale=0.2, size=dim)

    def shallow(self, z):
        return np.tanh(z @ self.a0 + self.b0) @ self.a1

    def deep(self, f_shallow):
        residual = np.tanh(f_shallow @ self.c0 + self.d0) @ self.c1
        return f_shallow @ self.rot + 0.5 * residual + self.c2


def _smooth_latent(rng, grid, latent_dim, category_shift):
    """Low-frequency latent field: coarse noise bilinearly upsampled."""
    coarse = rng.normal(size=(4, 4, latent_dim))
    ups = np.zeros((grid, grid, latent_dim))
    ys = (np.arange(grid) + 0.5) * (4 / grid) - 0.5
    ys = np.clip(ys, 0, 3)
    y0 = np.floor(ys).astype(int)
    y1 = np.minimum(y0 + 1, 3)
    wy = ys - y0
    for ch in range(latent_dim):
        plane = coarse[:, :, ch]
        rows = plane[y0] * (1 - wy)[:, None] + plane[y1] * wy[:, None]
        ups[:, :, ch] = (rows[:, y0] * (1 - wy)[None, :]
                         + rows[:, y1] * wy[None, :])
    return ups + category_shift


def generate(config: SynthConfig) -> str:
    """Write the synthetic dataset; returns the manifest path.

    Every random draw comes from one seeded generator in a fixed order, so a
    fixed seed reproduces the files bit for bit.
    """
    rng = np.random.default_rng(config.seed)
    g = config.grid
    p = config.patch_size
    pad = (config.pad,) * 4
    orig = g * p - 2 * config.pad
    j, k = config.layer_pair

    os.makedirs(config.out_dir, exist_ok=True)
    feat_dir = os.path.join(config.out_dir, "features")
    mask_dir = os.path.join(config.out_dir, "masks")
    os.makedirs(feat_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    teacher = _TeacherSim(rng, config.latent_dim, config.dim)
    category_shift = {c: rng.normal(scale=0.5, size=config.latent_dim)
                      for c in config.categories}

    entries = []
    for category in config.categories:
        plan = (
            [("train", "nominal")] * config.train_per_category
            + [("test", "nominal")] * config.nominal_test_per_category
            + [("test", "anomalous")] * config.anomalous_test_per_category
        )
        counters = {}
        for split, label in plan:
            idx = counters.get((split, label), 0)
            counters[(split, label)] = idx + 1
            sample_id = f"{category}_{split}_{label}_{idx:03d}"

            z = _smooth_latent(rng, g, config.latent_dim, category_shift[category])
            f_j = teacher.shallow(z.reshape(-1, config.latent_dim))
            f_k = teacher.deep(f_j)
            f_j = _renorm(f_j, config.feature_norm).reshape(g, g, config.dim)
            f_k = _renorm(f_k, config.feature_norm).reshape(g, g, config.dim)
            f_j = f_j + rng.normal(scale=config.obs_noise, size=f_j.shape)
            f_k = f_k + rng.normal(scale=config.obs_noise, size=f_k.shape)

            mask = np.zeros((orig, orig), dtype=np.uint8)
            if split == "test":
                # directional speckles: weak off-manifold pokes in one layer
                # at a time, the false positives the fused map must suppress
                for target in (f_j, f_k):
                    for _ in range(config.speckle_patches):
                        r, c = rng.integers(0, g, size=2)
                        target[r, c] = _redirect(target[r, c], _unit(rng, config.dim),
                                                 config.speckle_mag, config.feature_norm)
            if label == "anomalous":
                lo, hi = config.block_range
                bh, bw = rng.integers(lo, hi + 1, size=2)
                r0 = int(rng.integers(1, g - bh))
                c0 = int(rng.integers(1, g - bw))
                dir_j = _unit(rng, config.dim)
                dir_k = _unit(rng, config.dim)
                for rr in range(r0, r0 + bh):
                    for cc in range(c0, c0 + bw):
                        jit = 0.3 * _unit(rng, config.dim)
                        f_j[rr, cc] = _redirect(f_j[rr, cc], dir_j + jit,
                                                config.anomaly_mag, config.feature_norm)
                        jit = 0.3 * _unit(rng, config.dim)
                        f_k[rr, cc] = _redirect(f_k[rr, cc], dir_k + jit,
                                                config.anomaly_mag, config.feature_norm)
                mask[r0 * p - config.pad:(r0 + bh) * p - config.pad,
                     c0 * p - config.pad:(c0 + bw) * p - config.pad] = 255

            paths = {}
            for layer, feats in ((j, f_j), (k, f_k)):
                rel = os.path.join("features", f"{sample_id}_l{layer:02d}.pefg")
                write_grid(os.path.join(config.out_dir, rel), feats, layer,
                           p, (orig, orig), pad)
                paths[layer] = rel
            mask_rel = None
            if label == "anomalous":
                mask_rel = os.path.join("masks", f"{sample_id}.png")
                Image.fromarray(mask, mode="L").save(
                    os.path.join(config.out_dir, mask_rel))
            entries.append(sample_entry(sample_id, category, split, label,
                                        paths, mask_rel, (orig, orig)))

    manifest_path = os.path.join(config.out_dir, "manifest.json")
    write_manifest(manifest_path, "synthetic", config.layer_pair, entries)
    return manifest_path


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _renorm(rows, norm):
    """Scale each row vector to the given norm (embedding norms concentrate)."""
    rows = np.atleast_2d(rows)
    lengths = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows * (norm / np.maximum(lengths, 1e-12))


def _redirect(vec, direction, magnitude, norm):
    """Rotate ``vec`` toward ``direction`` by adding a scaled push, keeping the
    norm fixed: defects change embedding direction, not magnitude."""
    pushed = vec + magnitude * np.asarray(direction)
    return _renorm(pushed, norm)[0]
