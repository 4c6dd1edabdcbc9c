"""Inference pipeline: per-patch discrepancies, fusion, upsampling, smoothing,
padding removal, and the global top-M anomaly score."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, PatchmimicError
from .feature_store import FeatureGrid, SampleRecord, read_feature_grid, write_feature_grid
from .student import StudentNet, forward

FUSIONS = ("product", "sum", "delta_j_only", "delta_k_only")


@dataclass
class InferConfig:
    infer_distance: str = "l2"
    fusion: str = "product"
    smoothing_sigma: float = 4.0
    top_fraction: float = 0.001
    smooth_before_crop: bool = False  # sensitivity knob; default crops first

    def validate(self) -> None:
        if self.infer_distance not in ("l2", "cosine"):
            raise DataError(f"unknown infer_distance '{self.infer_distance}'")
        if self.fusion not in FUSIONS:
            raise DataError(f"unknown fusion '{self.fusion}'")
        if self.smoothing_sigma < 0:
            raise DataError(f"smoothing_sigma must be >= 0, got {self.smoothing_sigma}")
        if not 0 < self.top_fraction <= 1:
            raise DataError(f"top_fraction must be in (0, 1], got {self.top_fraction}")


@dataclass
class AnomalyMap:
    """Full-resolution non-negative score map for one image plus its global score."""

    sample_id: str
    map: np.ndarray  # (orig_h, orig_w) float32, padding already removed
    global_score: float


def patch_discrepancies(features: np.ndarray, predicted: np.ndarray,
                        distance: str) -> np.ndarray:
    """Per-patch distance between extracted and predicted embedding grids.

    Inputs are (grid_h, grid_w, dim); output is (grid_h, grid_w). l2 is the
    Euclidean norm of the difference, cosine is 1 - cosine similarity.
    """
    if features.shape != predicted.shape:
        raise DataError(f"shape mismatch: {features.shape} vs {predicted.shape}")
    if distance == "l2":
        return np.linalg.norm(features - predicted, axis=-1)
    if distance == "cosine":
        nf = np.linalg.norm(features, axis=-1)
        np_ = np.linalg.norm(predicted, axis=-1)
        dots = np.einsum("...d,...d->...", features, predicted)
        out = np.ones(features.shape[:-1], dtype=features.dtype)
        ok = (nf > 0) & (np_ > 0)
        out[ok] = 1.0 - dots[ok] / (nf[ok] * np_[ok])
        # float roundoff can leave tiny negatives on parallel vectors
        return np.maximum(out, 0.0)
    raise DataError(f"unknown distance '{distance}'")


def fuse(delta_j: np.ndarray, delta_k: np.ndarray, fusion: str) -> np.ndarray:
    """Combine the two direction-specific discrepancy grids into one."""
    if delta_j.shape != delta_k.shape:
        raise DataError(f"shape mismatch: {delta_j.shape} vs {delta_k.shape}")
    if fusion == "product":
        return delta_j * delta_k
    if fusion == "sum":
        return delta_j + delta_k
    if fusion == "delta_j_only":
        return delta_j.copy()
    if fusion == "delta_k_only":
        return delta_k.copy()
    raise DataError(f"unknown fusion '{fusion}'")


def upsample_bilinear(grid: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with the half-pixel-center convention.

    Output pixel x samples source coordinate (x + 0.5) * (src/dst) - 0.5,
    clamped to the borders; constant inputs map to constant outputs.
    """
    src_h, src_w = grid.shape
    out_h, out_w = target_hw
    if out_h < src_h or out_w < src_w:
        raise DataError(f"target {target_hw} smaller than source {grid.shape}")
    return resize_bilinear(grid, target_hw)


def resize_bilinear(grid: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling in either direction (half-pixel-center convention);
    used to bring maps to ground-truth resolution when they differ."""
    src_h, src_w = grid.shape
    out_h, out_w = target_hw

    def coords(n_src, n_dst):
        c = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        c = np.clip(c, 0.0, n_src - 1.0)
        lo = np.floor(c).astype(np.intp)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, (c - lo).astype(grid.dtype)

    r0, r1, wr = coords(src_h, out_h)
    c0, c1, wc = coords(src_w, out_w)
    top = grid[np.ix_(r0, c0)] * (1 - wc) + grid[np.ix_(r0, c1)] * wc
    bot = grid[np.ix_(r1, c0)] * (1 - wc) + grid[np.ix_(r1, c1)] * wc
    return top * (1 - wr)[:, None] + bot * wr[:, None]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian, truncated at radius ceil(4*sigma)."""
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(score_map: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders; sigma = 0 is the identity."""
    if sigma < 0:
        raise DataError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return score_map.copy()
    kernel = gaussian_kernel(sigma).astype(score_map.dtype)
    radius = len(kernel) // 2

    def convolve_rows(m):
        padded = np.pad(m, ((radius, radius), (0, 0)), mode="symmetric")
        out = np.zeros_like(m)
        for i, w in enumerate(kernel):
            out += w * padded[i:i + m.shape[0], :]
        return out

    return convolve_rows(convolve_rows(score_map).T).T


def crop_padding(score_map: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    """Remove the (top, left, bottom, right) padded border from a full-size map.

    Padded pixels must never reach the metrics: they score artificially low and
    would deflate the false positive rate.
    """
    top, left, bottom, right = pad
    h, w = score_map.shape
    if any(p < 0 for p in pad) or top + bottom >= h or left + right >= w:
        raise DataError(f"pad {pad} inconsistent with map of shape {score_map.shape}")
    return score_map[top:h - bottom, left:w - right].copy()


def top_m_count(h: int, w: int, top_fraction: float) -> int:
    """M = round-half-up(top_fraction * H * W), floored at 1."""
    return max(1, int(math.floor(top_fraction * h * w + 0.5)))


def global_score(score_map: np.ndarray, top_fraction: float) -> float:
    """Mean of the M largest map values; the image-level anomaly score."""
    flat = score_map.ravel()
    if flat.size == 0:
        raise DataError("empty anomaly map")
    m = min(top_m_count(*score_map.shape, top_fraction), flat.size)
    top = np.partition(flat, flat.size - m)[flat.size - m:]
    return float(top.mean())


def _check_grids(f_j: FeatureGrid, f_k: FeatureGrid) -> None:
    same = (f_j.grid_h == f_k.grid_h and f_j.grid_w == f_k.grid_w
            and f_j.patch_size == f_k.patch_size and f_j.pad == f_k.pad
            and f_j.orig_h == f_k.orig_h and f_j.orig_w == f_k.orig_w)
    if not same:
        raise DataError("layer feature grids disagree on geometry")


def infer_from_grids(sample_id: str, f_j: FeatureGrid, f_k: FeatureGrid,
                     s_f: StudentNet, s_b: StudentNet,
                     config: InferConfig) -> AnomalyMap:
    """Run the full map pipeline on already-loaded feature grids."""
    config.validate()
    _check_grids(f_j, f_k)
    gh, gw = f_j.grid_h, f_j.grid_w

    pred_k = forward(s_f, f_j.data.reshape(-1, f_j.dim)).reshape(gh, gw, f_k.dim)
    pred_j = forward(s_b, f_k.data.reshape(-1, f_k.dim)).reshape(gh, gw, f_j.dim)
    delta_k = patch_discrepancies(f_k.data, pred_k, config.infer_distance)
    delta_j = patch_discrepancies(f_j.data, pred_j, config.infer_distance)
    fused = fuse(delta_j, delta_k, config.fusion)

    m = upsample_bilinear(fused, f_j.padded_hw)
    if config.smooth_before_crop:
        m = gaussian_smooth(m, config.smoothing_sigma)
        m = crop_padding(m, f_j.pad)
    else:
        m = crop_padding(m, f_j.pad)
        m = gaussian_smooth(m, config.smoothing_sigma)
    score = global_score(m, config.top_fraction)
    if not np.isfinite(m).all():
        raise DataError("non-finite values in anomaly map")
    return AnomalyMap(sample_id=sample_id, map=m.astype(np.float32, copy=False),
                      global_score=score)


def to_ground_truth_resolution(amap: AnomalyMap,
                               image_dims: tuple[int, int]) -> AnomalyMap:
    """Bilinearly resample a map to the ground-truth resolution if the backbone
    ran on a resized image. The global score stays the one computed on the
    method-resolution map (the top-M statistic belongs to the inference side;
    only the segmentation metrics need ground-truth-sized maps)."""
    if amap.map.shape == tuple(image_dims):
        return amap
    resized = resize_bilinear(amap.map, tuple(image_dims))
    return AnomalyMap(sample_id=amap.sample_id,
                      map=resized.astype(np.float32, copy=False),
                      global_score=amap.global_score)


def infer(sample: SampleRecord, s_f: StudentNet, s_b: StudentNet,
          layer_pair: tuple[int, int], config: InferConfig) -> AnomalyMap:
    """Compute one sample's anomaly map from its on-disk feature grids,
    resampled to the sample's ground-truth resolution."""
    j, k = layer_pair
    try:
        for layer in (j, k):
            if layer not in sample.feature_paths:
                raise DataError(f"no features for layer {layer}")
        f_j = read_feature_grid(sample.feature_paths[j])
        f_k = read_feature_grid(sample.feature_paths[k])
        if f_j.layer_index != j or f_k.layer_index != k:
            raise DataError(
                f"feature files are for layers ({f_j.layer_index}, {f_k.layer_index}), "
                f"expected ({j}, {k})"
            )
        amap = infer_from_grids(sample.sample_id, f_j, f_k, s_f, s_b, config)
        return to_ground_truth_resolution(amap, sample.image_dims)
    except PatchmimicError as e:
        raise type(e)(f"sample '{sample.sample_id}': {e}") from None


def save_anomaly_map(amap: AnomalyMap, path: str | os.PathLike) -> None:
    """Persist a map in the same binary grid container as feature files
    (dim=1, patch_size=1, no padding)."""
    h, w = amap.map.shape
    grid = FeatureGrid(layer_index=0, grid_h=h, grid_w=w, dim=1, patch_size=1,
                       orig_h=h, orig_w=w, pad=(0, 0, 0, 0),
                       data=amap.map[:, :, None].astype(np.float32))
    write_feature_grid(grid, path)


def load_anomaly_map(path: str | os.PathLike, sample_id: str,
                     top_fraction: float = 0.001) -> AnomalyMap:
    """Read back a persisted map; the global score is recomputed from the map."""
    grid = read_feature_grid(path)
    if grid.dim != 1 or grid.patch_size != 1:
        raise DataError(f"{path}: not an anomaly-map grid (dim={grid.dim})")
    m = grid.data[:, :, 0]
    return AnomalyMap(sample_id=sample_id, map=m,
                      global_score=global_score(m, top_fraction))
