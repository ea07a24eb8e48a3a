"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

SUM_TOL = 1e-9


class ScoreGridError(ValueError):
    """Raised when an unnormalized score grid is malformed."""


class HeatMapError(ValueError):
    """Raised when a probability map violates its invariants."""


def check_score_grid(raw) -> np.ndarray:
    """Validate an unnormalized 2D score grid and return it as float64."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ScoreGridError(f"invalid score grid: expected non-empty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ScoreGridError("invalid score grid: non-finite cell")
    return arr


def check_heatmap(h, tol: float = SUM_TOL) -> np.ndarray:
    """Validate a probability map: 2D, nonnegative, sums to 1 within ``tol``."""
    arr = np.asarray(h, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise HeatMapError(f"expected non-empty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise HeatMapError("non-finite cell")
    if np.any(arr < 0):
        raise HeatMapError("negative cell")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise HeatMapError(f"cells sum to {total!r}, not 1")
    return arr


def check_unit_vector(v, tol: float = SUM_TOL) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (2,):
        raise ValueError(f"expected a 2-vector, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"expected unit norm, got {norm!r}")
    return arr


def check_in_grid(row: int, col: int, rows: int, cols: int) -> None:
    if not (0 <= row < rows and 0 <= col < cols):
        raise ValueError(f"location ({row}, {col}) outside {rows}x{cols} grid")
