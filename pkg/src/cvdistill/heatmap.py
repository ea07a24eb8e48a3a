"""Probability-map algebra on 2D grids.

All operations are pure functions on numpy arrays. A "heat map" is a
nonnegative 2D array summing to 1; a "score grid" is its unnormalized
counterpart. Cell indices are (row, col); ties resolve to the smallest
row-major index.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

from cvdistill.validation import (
    HeatMapError,
    check_heatmap,
    check_in_grid,
    check_score_grid,
)


class GridLoc(NamedTuple):
    """A cell index into a 2D grid."""

    row: int
    col: int

    def uv(self, rows: int, cols: int) -> tuple[float, float]:
        """Normalized (u, v) coordinates of the cell center, each in [0, 1]."""
        check_in_grid(self.row, self.col, rows, cols)
        return (self.col + 0.5) / cols, (self.row + 0.5) / rows


def normalize(raw) -> np.ndarray:
    """Softmax over all cells of an unnormalized score grid."""
    arr = check_score_grid(raw)
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def argmax_loc(h) -> GridLoc:
    """Cell of maximum value, smallest row-major index on ties."""
    arr = check_heatmap(h)
    idx = int(np.argmax(arr))
    r, c = np.unravel_index(idx, arr.shape)
    return GridLoc(int(r), int(c))


def one_hot(center: GridLoc, rows: int, cols: int) -> np.ndarray:
    check_in_grid(center.row, center.col, rows, cols)
    out = np.zeros((rows, cols))
    out[center.row, center.col] = 1.0
    return out


def gaussian_peak(center: GridLoc, rows: int, cols: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian centered on a cell, truncated to the grid and renormalized.

    ``sigma`` is in cells; ``sigma == 0`` degenerates to a one-hot map. The
    argmax of the result is always ``center``: truncation only removes mass
    away from the mode.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma!r}")
    check_in_grid(center.row, center.col, rows, cols)
    if sigma == 0:
        return one_hot(center, rows, cols)
    rr = np.arange(rows)[:, None] - center.row
    cc = np.arange(cols)[None, :] - center.col
    logp = -(rr**2 + cc**2) / (2.0 * sigma**2)
    p = np.exp(logp)
    return p / p.sum()


def block_sum(values, target_rows: int, target_cols: int) -> np.ndarray:
    """Sum-pool a 2D array into non-overlapping blocks (mass conserving)."""
    arr = np.asarray(values, dtype=np.float64)
    rows, cols = arr.shape
    if target_rows < 1 or target_cols < 1 or rows % target_rows or cols % target_cols:
        raise HeatMapError(
            f"incompatible pyramid levels: {rows}x{cols} -> {target_rows}x{target_cols}"
        )
    fr, fc = rows // target_rows, cols // target_cols
    return arr.reshape(target_rows, fr, target_cols, fc).sum(axis=(1, 3))


def block_downsample(h, target_rows: int, target_cols: int) -> np.ndarray:
    """Mass-conserving downsample of a heat map, renormalized for float safety."""
    arr = check_heatmap(h)
    out = block_sum(arr, target_rows, target_cols)
    return out / out.sum()


def entropy(h) -> float:
    """Shannon entropy in nats, with the 0*ln(0) := 0 convention."""
    arr = check_heatmap(h)
    nz = arr[arr > 0]
    return float(-(nz * np.log(nz)).sum())


def coarse_loc(loc: GridLoc, rows: int, cols: int, target_rows: int, target_cols: int) -> GridLoc:
    """The target-resolution block containing a source-resolution cell."""
    check_in_grid(loc.row, loc.col, rows, cols)
    if rows % target_rows or cols % target_cols:
        raise HeatMapError(
            f"incompatible pyramid levels: {rows}x{cols} -> {target_rows}x{target_cols}"
        )
    return GridLoc(loc.row // (rows // target_rows), loc.col // (cols // target_cols))


_MAGIC = b"CVHM"


def save_heatmap(path, h) -> None:
    """Write a heat map as a small binary: magic, rows, cols, row-major float64."""
    arr = check_heatmap(h)
    rows, cols = arr.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(arr.astype("<f8").tobytes())


def load_heatmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise HeatMapError(f"bad heat map file header: {magic!r}")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 8), dtype="<f8")
    return check_heatmap(data.reshape(rows, cols))


def heatmap_to_csv(path, h) -> None:
    np.savetxt(path, check_heatmap(h), delimiter=",")
