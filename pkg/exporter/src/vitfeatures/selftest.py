"""Format self-test: regenerate the golden feature file and compare bytes."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .pefg import read_grid, write_grid

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")
GOLDEN_PATH = os.path.join(GOLDEN_DIR, "golden_3x2x4_l8.pefg")


def golden_payload() -> np.ndarray:
    """Fixed integer ramp scaled to eighths: stable across platforms."""
    return (np.arange(3 * 2 * 4, dtype=np.float32) / 8.0).reshape(3, 2, 4)


def write_golden(path=GOLDEN_PATH) -> str:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    # grid 3x2, patch 5: padded 15x10, orig 13x9, pad (1,0,1,1)
    write_grid(path, golden_payload(), layer_index=8, patch_size=5,
               orig_hw=(13, 9), pad=(1, 0, 1, 1))
    return path


def run_selftest(golden: str | None = None) -> bool:
    """Write the reference grid afresh and demand byte equality with the
    checked-in golden file, plus a read-back consistency pass."""
    golden = golden or GOLDEN_PATH
    if not os.path.isfile(golden):
        print(f"golden file missing: {golden}")
        return False
    with tempfile.TemporaryDirectory() as tmp:
        fresh = write_golden(os.path.join(tmp, "fresh.pefg"))
        fresh_bytes = open(fresh, "rb").read()
    golden_bytes = open(golden, "rb").read()
    if fresh_bytes != golden_bytes:
        print(f"byte mismatch: fresh {len(fresh_bytes)}B vs golden "
              f"{len(golden_bytes)}B")
        return False
    header, data = read_grid(golden)
    checks = (
        header["layer_index"] == 8,
        header["grid_h"] == 3 and header["grid_w"] == 2 and header["dim"] == 4,
        header["patch_size"] == 5,
        header["orig_h"] == 13 and header["orig_w"] == 9,
        header["pad"] == (1, 0, 1, 1),
        bool((data == golden_payload()).all()),
        len(golden_bytes) == 52 + 3 * 2 * 4 * 4,
    )
    if not all(checks):
        print(f"read-back checks failed: {checks}")
        return False
    return True
