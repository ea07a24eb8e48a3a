"""Comparison methods: entropy minimization, noisy-GT finetuning, entropy filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cvdistill import model as md
from cvdistill.distill import FilterReport
from cvdistill.model import LocalizerWeights, TrainConfig
from cvdistill.world import DatasetSplit


@dataclass(frozen=True)
class EmConfig:
    """Entropy-minimization settings: weight and training mode."""

    omega: float = 0.0
    mode: str = "joint"  # 'joint' = supervised source + target entropy; 'finetune-only'

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.mode not in ("joint", "finetune-only"):
            raise ValueError(f"unknown entropy-minimization mode {self.mode!r}")


@dataclass(frozen=True)
class NoisyGtConfig:
    """Uniform per-axis GT corruption bound, in meters."""

    bound_m: float = 0.0

    def __post_init__(self):
        if self.bound_m < 0:
            raise ValueError("bound must be >= 0")


def train_entropy_min(
    weights: LocalizerWeights,
    source_split: DatasetSplit | None,
    target_split: DatasetSplit,
    em_config: EmConfig,
    config: TrainConfig,
    label_sigma: float = 4.0,
    val_split: DatasetSplit | None = None,
) -> LocalizerWeights:
    """Train with the two-branch objective: supervised on source, entropy on target.

    In joint mode each step combines one labeled source batch with one target
    batch whose gradient is exactly omega times the entropy gradient of the
    finest heat map; omega = 0 reproduces plain supervised training on the
    source split bit-exactly. Finetune-only mode drops the source branch.
    """
    if em_config.mode == "joint":
        if source_split is None:
            raise ValueError("joint mode needs a labeled source split")
        rows, cols = source_split.grid_shape
        labels = md.smoothed_location_labels(
            source_split.gt_array(), rows, cols, weights.levels, label_sigma
        )
        trained, _ = md.train(
            weights, source_split, labels, config, val_split,
            em_split=target_split, em_weight=em_config.omega,
        )
        return trained
    return _entropy_only_finetune(weights, target_split, em_config.omega, config, val_split)


def _entropy_only_finetune(weights, target_split, omega, config, val_split):
    n = len(target_split)
    grounds = target_split.grounds()
    rng = np.random.default_rng(config.seed)
    w = weights.copy()
    v_g = np.zeros_like(w.w_ground)
    v_a = np.zeros_like(w.w_aerial)
    best = (np.inf, None)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            pooled = md.pool_levels(target_split.aerial_batch(idx), w.levels)
            _, gw_g, gw_a = md.backward_batch(w, grounds[idx], pooled, w.levels, None, em_weight=omega)
            v_g = config.momentum * v_g - config.learning_rate * gw_g
            v_a = config.momentum * v_a - config.learning_rate * gw_a
            w.w_ground = w.w_ground + v_g
            w.w_aerial = w.w_aerial + v_a
        if val_split is not None:
            err = md.mean_error_cells(w, val_split)
            if err < best[0]:
                best = (err, w.copy())
    if val_split is not None and best[1] is not None:
        return best[1]
    return w


def corrupt_ground_truth(
    split: DatasetSplit, noisy_config: NoisyGtConfig, seed: int
) -> tuple[np.ndarray, int]:
    """Shift every GT cell by a uniform per-axis offset within the bound.

    Offsets are drawn once (in meters), converted to cells, rounded to the
    nearest cell and clamped to the grid interior. Returns the corrupted (N, 2)
    cell array and the number of clamped samples. Regeneration with the same
    seed is bit-identical.
    """
    rows, cols = split.grid_shape
    gt = split.unlock_gt().gt_array().astype(np.float64)
    rng = np.random.default_rng(seed)
    offsets_m = rng.uniform(-noisy_config.bound_m, noisy_config.bound_m, size=gt.shape)
    shifted = np.rint(gt + offsets_m / split.scale_s)
    clamped = np.clip(shifted, [1, 1], [rows - 2, cols - 2])
    n_clamped = int(np.any(clamped != shifted, axis=1).sum())
    return clamped.astype(np.int64), n_clamped


def train_noisy_supervised(
    weights: LocalizerWeights,
    target_split: DatasetSplit,
    noisy_config: NoisyGtConfig,
    config: TrainConfig,
    label_sigma: float = 4.0,
    noise_seed: int = 0,
    val_split: DatasetSplit | None = None,
) -> tuple[LocalizerWeights, int]:
    """Supervised finetuning on (possibly corrupted) target GT.

    Bound 0 is the oracle: finetuning on the true fine GT. Returns the trained
    weights and the number of corrupted locations clamped to the interior.
    """
    open_split = target_split.unlock_gt()
    rows, cols = open_split.grid_shape
    centers, n_clamped = corrupt_ground_truth(open_split, noisy_config, noise_seed)
    labels = md.smoothed_location_labels(centers, rows, cols, weights.levels, label_sigma)
    trained, _ = md.train(weights, open_split, labels, config, val_split)
    return trained, n_clamped


def filter_by_entropy(
    weights: LocalizerWeights, split: DatasetSplit, t_percent: float
) -> FilterReport:
    """Keep the T% most certain samples, ranked by finest heat map entropy.

    Same cardinality rule and tie-break as the distance-based filter; the
    report's 'distances' field holds the entropies (in nats).
    """
    if not (0 < t_percent <= 100):
        raise ValueError("empty training set: T must be in (0, 100]")
    n = len(split)
    grounds = split.grounds()
    entropies = np.empty(n)
    batch = 256
    for start in range(0, n, batch):
        idx = list(range(start, min(start + batch, n)))
        pooled = md.pool_levels(split.aerial_batch(idx), weights.levels)
        _, heatmaps, _, _ = md.forward_batch(weights, grounds[idx], pooled)
        h = heatmaps[-1]
        entropies[idx] = -(h * np.log(np.maximum(h, 1e-300))).sum(axis=1)
    pair_ids = split.pair_ids()
    n_keep = math.ceil(t_percent / 100.0 * n)
    order = np.lexsort((pair_ids, entropies))
    kept = np.zeros(n, dtype=bool)
    kept[order[:n_keep]] = True
    threshold = float(entropies[order[n_keep - 1]])
    return FilterReport(pair_ids, entropies, kept, threshold, float(t_percent))
