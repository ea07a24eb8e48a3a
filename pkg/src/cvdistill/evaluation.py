"""Localization metrics and diagnostic exports.

Displacement error is the L2 distance in cells between the finest-level
argmax and the GT cell, scaled to meters. Errors decompose into a
longitudinal component (along the pair's known heading) and a lateral one
(perpendicular); the decomposition satisfies eps^2 = lon^2 + lat^2 exactly.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import ConstantInputWarning, spearmanr

from cvdistill import model as md
from cvdistill.model import LocalizerWeights
from cvdistill.world import DatasetSplit


@dataclass
class EvalResult:
    pair_ids: np.ndarray
    predicted: np.ndarray  # (N, 2) cells
    gt: np.ndarray  # (N, 2) cells
    errors_m: np.ndarray
    lon_m: np.ndarray
    lat_m: np.ndarray
    scale_s: float

    def __post_init__(self):
        # Self-check: aggregates recomputed from a sort must agree.
        srt = np.sort(self.errors_m)
        n = srt.size
        mean_check = float(srt.sum() / n)
        median_check = float(srt[n // 2]) if n % 2 else float((srt[n // 2 - 1] + srt[n // 2]) / 2)
        assert abs(mean_check - self.mean_m) < 1e-9
        assert abs(median_check - self.median_m) < 1e-9

    @property
    def mean_m(self) -> float:
        return float(np.mean(self.errors_m))

    @property
    def median_m(self) -> float:
        return float(np.median(self.errors_m))


def evaluate(weights: LocalizerWeights, split: DatasetSplit) -> EvalResult:
    """Per-sample displacement errors of a model on a split.

    This is evaluation code, so the split's fine GT is unlocked here.
    """
    open_split = split.unlock_gt()
    pred = md.predict_locations(weights, open_split)
    gt = open_split.gt_array()
    s = open_split.scale_s
    err_vec = (pred - gt).astype(np.float64)
    errors = s * np.linalg.norm(err_vec, axis=1)
    headings = open_split.headings()
    lon = s * np.abs(np.einsum("ij,ij->i", err_vec, headings))
    perp = np.stack([-headings[:, 1], headings[:, 0]], axis=1)
    lat = s * np.abs(np.einsum("ij,ij->i", err_vec, perp))
    return EvalResult(open_split.pair_ids(), pred, gt, errors, lon, lat, s)


@dataclass
class ComparisonRecord:
    pair_ids: np.ndarray
    errors_a: np.ndarray
    errors_b: np.ndarray
    delta: np.ndarray  # b - a per sample
    improved: int  # delta < 0
    worsened: int  # delta > 0
    unchanged: int
    hist_edges: np.ndarray
    hist_counts: np.ndarray


def compare(a: EvalResult, b: EvalResult, n_bins: int = 21) -> ComparisonRecord:
    """Paired per-sample error change between two evaluations of the same split."""
    if a.pair_ids.shape != b.pair_ids.shape or not np.array_equal(a.pair_ids, b.pair_ids):
        raise ValueError("evaluations cover different samples")
    delta = b.errors_m - a.errors_m
    span = max(float(np.abs(delta).max()), 1e-12)
    edges = np.linspace(-span, span, n_bins + 1)
    counts, _ = np.histogram(delta, bins=edges)
    assert int(counts.sum()) == delta.size
    return ComparisonRecord(
        a.pair_ids.copy(),
        a.errors_m.copy(),
        b.errors_m.copy(),
        delta,
        int((delta < 0).sum()),
        int((delta > 0).sum()),
        int((delta == 0).sum()),
        edges,
        counts,
    )


def rank_correlation(d_list, eps_list) -> float:
    """Spearman rank correlation with average-rank ties."""
    d = np.asarray(d_list, dtype=np.float64)
    e = np.asarray(eps_list, dtype=np.float64)
    if d.shape != e.shape or d.ndim != 1:
        raise ValueError("inputs must be 1D and of equal length")
    if d.size < 2:
        raise ValueError("need at least 2 points")
    with warnings.catch_warnings():
        # constant input has no defined rank correlation; we map it to 0 below
        warnings.simplefilter("ignore", ConstantInputWarning)
        rho = spearmanr(d, e).statistic
    return float(rho) if np.isfinite(rho) else 0.0


# --- CSV exports (stable column orders) ------------------------------------

PER_SAMPLE_COLUMNS = ["pair_id", "eps_m", "eps_lon_m", "eps_lat_m", "d_cells", "kept"]


def write_per_sample_csv(path, result: EvalResult, d_cells=None, kept=None) -> None:
    n = result.pair_ids.size
    d_cells = np.full(n, np.nan) if d_cells is None else np.asarray(d_cells)
    kept = np.ones(n, dtype=bool) if kept is None else np.asarray(kept)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PER_SAMPLE_COLUMNS)
        for i in range(n):
            writer.writerow(
                [
                    int(result.pair_ids[i]),
                    repr(float(result.errors_m[i])),
                    repr(float(result.lon_m[i])),
                    repr(float(result.lat_m[i])),
                    repr(float(d_cells[i])),
                    int(kept[i]),
                ]
            )


def write_histogram_csv(path, record: ComparisonRecord) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, count in enumerate(record.hist_counts):
            writer.writerow(
                [repr(float(record.hist_edges[i])), repr(float(record.hist_edges[i + 1])), int(count)]
            )


def write_scatter_csv(path, d_values, eps_values, pair_ids) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair_id", "d", "eps"])
        for pid, d, e in zip(pair_ids, d_values, eps_values):
            writer.writerow([int(pid), repr(float(d)), repr(float(e))])
