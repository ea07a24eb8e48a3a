"""Weakly-supervised self-distillation pipeline.

Stages: generate pseudo ground truth from a teacher's predictions on the
adapt split, train an auxiliary student on all of it, filter out samples
where teacher and auxiliary student disagree the most, and train the final
student on the kept subset. Pseudo GT is computed once and frozen; no
teacher queries happen during student epochs.

Variant tags follow the ablation naming: ``st-m-of`` (raw teacher heat maps,
no filtering), ``st+m-of`` (mode-based pseudo GT, no filtering), ``st+m+of``
(mode-based plus filtering, the proposed pipeline) and ``st+m+a`` (second
round using the auxiliary student's own predictions as pseudo GT).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from cvdistill import model as md
from cvdistill.model import LocalizerWeights, TrainConfig
from cvdistill.world import DatasetSplit

VARIANTS = ("teacher", "st-m-of", "st+m-of", "st+m+of", "st+m+a")


@dataclass
class PseudoGtSet:
    """Frozen per-sample label pyramids plus the teacher modes that produced them."""

    levels: list  # one (N, rk, ck) array per level, coarse to fine
    modes: np.ndarray  # (N, 2) finest-level argmax of the generating model
    pair_ids: np.ndarray
    variant: str  # 'mode' or 'raw'
    sigma: float

    def __len__(self) -> int:
        return self.modes.shape[0]

    def pyramid(self, i: int) -> list:
        return [lev[i] for lev in self.levels]

    def subset(self, indices) -> "PseudoGtSet":
        return PseudoGtSet(
            [lev[indices] for lev in self.levels],
            self.modes[indices],
            self.pair_ids[indices],
            self.variant,
            self.sigma,
        )


@dataclass
class FilterReport:
    """Outcome of top-T% sample selection by teacher/student disagreement."""

    pair_ids: np.ndarray
    distances: np.ndarray  # cells at the finest level
    kept: np.ndarray  # boolean mask aligned with pair_ids
    threshold: float
    t_percent: float

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())

    @property
    def n_total(self) -> int:
        return self.kept.shape[0]

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)


def make_pseudo_gt(
    teacher: LocalizerWeights, split: DatasetSplit, variant: str = "mode", sigma: float = 4.0
) -> PseudoGtSet:
    """Generate the label pyramid for every pair from the teacher's predictions.

    ``variant='mode'`` places a Gaussian at the finest-level argmax;
    ``variant='raw'`` uses the finest heat map itself. Either way the
    finest-level target is down-sampled to all coarser levels.
    """
    if variant not in ("mode", "raw"):
        raise ValueError(f"unknown pseudo GT variant {variant!r}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rows, cols = split.grid_shape
    n = len(split)
    grounds = split.grounds()
    modes = np.empty((n, 2), dtype=np.int64)
    tops = np.empty((n, rows, cols))
    batch = 256
    for start in range(0, n, batch):
        idx = list(range(start, min(start + batch, n)))
        pooled = md.pool_levels(split.aerial_batch(idx), teacher.levels)
        scores, heatmaps, _, _ = md.forward_batch(teacher, grounds[idx], pooled)
        flat = np.argmax(scores[-1], axis=1)
        modes[idx, 0] = flat // cols
        modes[idx, 1] = flat % cols
        tops[idx] = heatmaps[-1].reshape(len(idx), rows, cols)
    if variant == "mode":
        top_labels = md.gaussian_label_stack(modes, rows, cols, sigma)
    else:
        top_labels = tops
    levels = md.pyramid_labels_from_top(top_labels, teacher.levels)
    return PseudoGtSet(levels, modes, split.pair_ids(), variant, sigma)


def train_student(
    teacher: LocalizerWeights,
    split: DatasetSplit,
    pseudo: PseudoGtSet,
    config: TrainConfig,
    val_split: DatasetSplit | None = None,
) -> LocalizerWeights:
    """Train a student initialized from the teacher on frozen pseudo GT."""
    if len(pseudo) != len(split):
        raise ValueError("pseudo GT set does not match split size")
    weights, _ = md.train(teacher.copy(), split, pseudo.levels, config, val_split)
    return weights


def filter_outliers(
    teacher: LocalizerWeights, aux: LocalizerWeights, split: DatasetSplit, t_percent: float
) -> FilterReport:
    """Keep the ceil(T% * N) samples with the smallest teacher/aux disagreement.

    Distance is the L2 norm between the two finest-level argmax cells; ties at
    the threshold break toward the smaller pair id.
    """
    if not (0 < t_percent <= 100):
        raise ValueError("empty training set: T must be in (0, 100]")
    y_teacher = md.predict_locations(teacher, split)
    y_aux = md.predict_locations(aux, split)
    d = np.linalg.norm((y_teacher - y_aux).astype(np.float64), axis=1)
    pair_ids = split.pair_ids()
    n = len(split)
    n_keep = math.ceil(t_percent / 100.0 * n)
    order = np.lexsort((pair_ids, d))
    kept = np.zeros(n, dtype=bool)
    kept[order[:n_keep]] = True
    threshold = float(d[order[n_keep - 1]])
    return FilterReport(pair_ids, d, kept, threshold, float(t_percent))


@dataclass
class DistillConfig:
    sigma: float = 4.0
    t_percent: float = 80.0
    supervise_levels: int = 2
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    stopping: str = "validation"  # 'validation' uses the labeled val split; 'fixed' a fixed budget

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            supervise_levels=self.supervise_levels,
            seed=self.seed + seed_offset,
        )


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def run_pipeline(
    splits: dict[str, DatasetSplit],
    teacher: LocalizerWeights,
    config: DistillConfig,
    variant: str = "st+m+of",
) -> dict:
    """Execute one adaptation variant end to end and collect all artifacts.

    Returns a record with the trained models, the filter report (when
    filtering runs), per-sample teacher/aux disagreement and teacher error on
    the adapt split, and stage timings.
    """
    from cvdistill import evaluation as ev

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    record: dict = {"variant": variant, "config": config.__dict__.copy(), "timings": {}}
    adapt = splits["adapt"]
    val = splits["target-val"] if config.stopping == "validation" else None

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with stage name
            raise PipelineStageError(name, exc) from exc
        record["timings"][name] = time.perf_counter() - t0
        return result

    record["models"] = {"teacher": teacher}
    if variant == "teacher":
        return record

    pseudo_variant = "raw" if variant == "st-m-of" else "mode"
    pseudo = stage("pseudo-gt", lambda: make_pseudo_gt(teacher, adapt, pseudo_variant, config.sigma))
    record["pseudo_variant"] = pseudo_variant

    if variant in ("st-m-of", "st+m-of"):
        student = stage(
            "student", lambda: train_student(teacher, adapt, pseudo, config.train_config(), val)
        )
        record["models"]["final"] = student
        return record

    aux = stage("aux-student", lambda: train_student(teacher, adapt, pseudo, config.train_config(), val))
    record["models"]["aux"] = aux

    if variant == "st+m+a":
        # Second distillation round: the auxiliary student becomes the teacher.
        pseudo2 = stage("pseudo-gt-round2", lambda: make_pseudo_gt(teacher=aux, split=adapt,
                                                                   variant="mode", sigma=config.sigma))
        final = stage(
            "final-student", lambda: train_student(teacher, adapt, pseudo2, config.train_config(), val)
        )
        record["models"]["final"] = final
        return record

    report = stage("outlier-filter", lambda: filter_outliers(teacher, aux, adapt, config.t_percent))
    record["filter_report"] = report
    kept = report.kept_indices()
    final = stage(
        "final-student",
        lambda: train_student(
            teacher, adapt.subset(kept), pseudo.subset(kept), config.train_config(), val
        ),
    )
    record["models"]["final"] = final

    # Per-sample diagnostics on the adapt split: disagreement vs teacher error.
    adapt_eval = ev.evaluate(teacher, adapt)
    record["adapt_diagnostics"] = {
        "pair_id": report.pair_ids,
        "d_cells": report.distances,
        "teacher_error_m": adapt_eval.errors_m,
        "kept": report.kept,
    }
    record["d_eps_spearman"] = ev.rank_correlation(report.distances, adapt_eval.errors_m)
    return record


class SelfDistillationAdapter(BaseEstimator):
    """Estimator-style wrapper around :func:`run_pipeline`.

    ``fit`` takes the world's splits plus a trained teacher and stores the
    adapted weights in ``student_``; ``predict`` delegates to them.
    """

    def __init__(self, variant: str = "st+m+of", sigma: float = 4.0, t_percent: float = 80.0,
                 supervise_levels: int = 2, learning_rate: float = 0.05, momentum: float = 0.9,
                 epochs: int = 20, batch_size: int = 64, random_state: int = 0,
                 stopping: str = "validation"):
        self.variant = variant
        self.sigma = sigma
        self.t_percent = t_percent
        self.supervise_levels = supervise_levels
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.stopping = stopping

    def fit(self, splits: dict[str, DatasetSplit], teacher: LocalizerWeights):
        config = DistillConfig(
            sigma=self.sigma,
            t_percent=self.t_percent,
            supervise_levels=self.supervise_levels,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            stopping=self.stopping,
        )
        self.record_ = run_pipeline(splits, teacher, config, self.variant)
        self.student_ = self.record_["models"].get("final", teacher)
        return self

    def predict(self, split: DatasetSplit) -> np.ndarray:
        if not hasattr(self, "student_"):
            raise RuntimeError("not fitted")
        return md.predict_locations(self.student_, split)
