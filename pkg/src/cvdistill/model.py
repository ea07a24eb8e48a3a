"""Toy coarse-to-fine localization model with exact hand-derived gradients.

The model is a bilinear matcher: ground observations and (sum-pooled) aerial
cell features are projected into a shared embedding by two matrices, and the
per-cell dot products form one score grid per pyramid level. The projections
are shared across levels, so pooled coarse scores and fine scores are tied
through the same parameters and supervising only the coarse levels still
moves the finest prediction.

Training is plain SGD with momentum, fully deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from cvdistill.heatmap import GridLoc
from cvdistill.world import DatasetSplit


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class LocalizerWeights:
    """Learnable parameters: one ground and one aerial projection, shared by all levels."""

    w_ground: np.ndarray  # (channels, embed_dim)
    w_aerial: np.ndarray  # (channels, embed_dim)
    levels: int

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("a coarse-to-fine model needs at least 2 levels")
        if self.w_ground.shape != self.w_aerial.shape:
            raise ValueError("projection shapes must match")
        if not (np.all(np.isfinite(self.w_ground)) and np.all(np.isfinite(self.w_aerial))):
            raise ValueError("non-finite parameters")

    @property
    def channels(self) -> int:
        return self.w_ground.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w_ground.shape[1]

    def copy(self) -> "LocalizerWeights":
        return LocalizerWeights(self.w_ground.copy(), self.w_aerial.copy(), self.levels)

    def allclose(self, other: "LocalizerWeights") -> bool:
        return (
            self.levels == other.levels
            and np.array_equal(self.w_ground, other.w_ground)
            and np.array_equal(self.w_aerial, other.w_aerial)
        )


def init_weights(channels: int, embed_dim: int, levels: int, seed: int = 0) -> LocalizerWeights:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(channels)
    return LocalizerWeights(
        rng.standard_normal((channels, embed_dim)) * scale,
        rng.standard_normal((channels, embed_dim)) * scale,
        levels,
    )


@dataclass
class PredictionPyramid:
    """Per-level score grids and heat maps; resolutions strictly increasing."""

    scores: list
    heatmaps: list
    final_loc: GridLoc


def level_shapes(rows: int, cols: int, levels: int) -> list[tuple[int, int]]:
    """Grid shapes coarse-to-fine; each level doubles resolution per dimension."""
    factor = 2 ** (levels - 1)
    if rows % factor or cols % factor:
        raise ValueError(f"{rows}x{cols} grid not divisible across {levels} levels")
    return [(rows // 2**k, cols // 2**k) for k in range(levels - 1, -1, -1)]


def pool_levels(aerial_batch: np.ndarray, levels: int) -> list[np.ndarray]:
    """Sum-pool a batch of aerial grids to every pyramid level.

    Input (B, rows, cols, C); output, coarse-to-fine, (B, rk*ck, C) per level.
    """
    b, rows, cols, ch = aerial_batch.shape
    out = []
    for rk, ck in level_shapes(rows, cols, levels):
        fr, fc = rows // rk, cols // ck
        pooled = aerial_batch.reshape(b, rk, fr, ck, fc, ch).sum(axis=(2, 4))
        out.append(pooled.reshape(b, rk * ck, ch).astype(np.float64))
    return out


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_batch(weights: LocalizerWeights, grounds: np.ndarray, pooled: list[np.ndarray]):
    """Score grids and heat maps for a batch.

    Returns (scores, heatmaps, ground_embed, aerial_embeds), the embeddings
    being reused by the backward pass.
    """
    scale = 1.0 / np.sqrt(weights.embed_dim)
    ge = grounds.astype(np.float64) @ weights.w_ground
    scores, heatmaps, aerial_embeds = [], [], []
    for pk in pooled:
        ae = pk @ weights.w_aerial
        s = np.einsum("bne,be->bn", ae, ge) * scale
        h = np.exp(_log_softmax(s))
        scores.append(s)
        heatmaps.append(h)
        aerial_embeds.append(ae)
    return scores, heatmaps, ge, aerial_embeds


def forward(weights: LocalizerWeights, pair) -> PredictionPyramid:
    """Single-pair prediction pyramid."""
    rows, cols = pair.aerial.shape[:2]
    if pair.aerial.shape[2] != weights.channels:
        raise ValueError(
            f"pair has {pair.aerial.shape[2]} channels, model expects {weights.channels}"
        )
    pooled = pool_levels(pair.aerial[None], weights.levels)
    scores, heatmaps, _, _ = forward_batch(weights, pair.ground[None], pooled)
    shapes = level_shapes(rows, cols, weights.levels)
    score_grids = [s[0].reshape(shape) for s, shape in zip(scores, shapes)]
    heat_grids = [h[0].reshape(shape) for h, shape in zip(heatmaps, shapes)]
    top = heat_grids[-1]
    idx = int(np.argmax(top))
    loc = GridLoc(*(int(v) for v in np.unravel_index(idx, top.shape)))
    return PredictionPyramid(score_grids, heat_grids, loc)


def _check_cutoff(levels: int, supervise_levels: int | None) -> int:
    k = levels if supervise_levels is None else supervise_levels
    if not (1 <= k <= levels):
        raise ValueError(f"level cutoff {k} outside 1..{levels}")
    return k


def distill_loss_batch(heatmaps: list[np.ndarray], labels: list[np.ndarray], cutoff: int) -> float:
    """Label-weighted infoNCE, averaged over the first ``cutoff`` levels and the batch.

    With normalized labels this is the cross entropy -sum(P * log H) per level.
    """
    total = 0.0
    for h, p in zip(heatmaps[:cutoff], labels[:cutoff]):
        logh = np.log(h)
        total += float(-(p * logh).sum()) / h.shape[0]
    return total / cutoff


def backward_batch(
    weights: LocalizerWeights,
    grounds: np.ndarray,
    pooled: list[np.ndarray],
    cutoff: int,
    labels: list[np.ndarray] | None = None,
    em_weight: float = 0.0,
):
    """Exact gradients of the batch-mean loss w.r.t. both projections.

    With ``labels`` given, the loss is the distillation loss over levels
    <= cutoff. With ``em_weight`` > 0 and no labels, the loss is em_weight
    times the Shannon entropy of the finest heat map. Levels beyond the
    cutoff contribute exactly zero gradient.
    """
    scale = 1.0 / np.sqrt(weights.embed_dim)
    b = grounds.shape[0]
    scores, heatmaps, ge, aerial_embeds = forward_batch(weights, grounds, pooled)

    deltas = []  # (level index, dLoss/dscore)
    loss = 0.0
    if labels is not None:
        for k in range(cutoff):
            h, p = heatmaps[k], labels[k]
            logh = _log_softmax(scores[k])
            loss += float(-(p * logh).sum()) / b
            deltas.append((k, (h - p) / (cutoff * b)))
        loss /= cutoff
    if em_weight:
        h = heatmaps[-1]
        logh = _log_softmax(scores[-1])
        ent = -(h * logh).sum(axis=1, keepdims=True)
        loss += em_weight * float(ent.sum()) / b
        deltas.append((len(pooled) - 1, -em_weight * h * (logh + ent) / b))

    gw_g = np.zeros_like(weights.w_ground)
    gw_a = np.zeros_like(weights.w_aerial)
    for k, delta in deltas:
        ae, pk = aerial_embeds[k], pooled[k]
        q = np.einsum("bn,bne->be", delta, ae)  # per-sample weighted aerial embed
        t = np.einsum("bn,bnc->bc", delta, pk)  # per-sample weighted aerial feature
        gw_g += grounds.astype(np.float64).T @ q * scale
        gw_a += t.T @ ge * scale
    return loss, gw_g, gw_a


# --- label construction ----------------------------------------------------

def gaussian_label_stack(centers: np.ndarray, rows: int, cols: int, sigma: float) -> np.ndarray:
    """(N, rows, cols) stack of normalized Gaussians at per-sample centers."""
    n = centers.shape[0]
    if sigma == 0:
        out = np.zeros((n, rows, cols))
        out[np.arange(n), centers[:, 0], centers[:, 1]] = 1.0
        return out
    rr = np.arange(rows)[None, :, None] - centers[:, 0][:, None, None]
    cc = np.arange(cols)[None, None, :] - centers[:, 1][:, None, None]
    p = np.exp(-(rr**2 + cc**2) / (2.0 * sigma**2))
    return p / p.sum(axis=(1, 2), keepdims=True)


def smoothed_location_labels(
    centers: np.ndarray, rows: int, cols: int, levels: int, sigma: float
) -> list[np.ndarray]:
    """Per-level Gaussian labels for finest-grid centers.

    Centers are rescaled to each level's grid and the smoothing radius is
    scaled with the resolution ratio, so the label's metric footprint is the
    same at every level.
    """
    shapes = level_shapes(rows, cols, levels)
    out = []
    for rk, ck in shapes:
        fr, fc = rows // rk, cols // ck
        level_centers = np.stack([centers[:, 0] // fr, centers[:, 1] // fc], axis=1)
        out.append(gaussian_label_stack(level_centers, rk, ck, sigma * rk / rows))
    return out


def pyramid_labels_from_top(top_maps: np.ndarray, levels: int) -> list[np.ndarray]:
    """Down-sample finest-level target maps to every level (mass conserving)."""
    n, rows, cols = top_maps.shape
    out = []
    for rk, ck in level_shapes(rows, cols, levels):
        fr, fc = rows // rk, cols // ck
        p = top_maps.reshape(n, rk, fr, ck, fc).sum(axis=(2, 4))
        out.append(p / p.sum(axis=(1, 2), keepdims=True))
    return out


def supervised_loss(pyr: PredictionPyramid, gt: GridLoc, sigma: float) -> float:
    """Distillation loss of one pyramid against smoothed labels at the GT cell."""
    rows, cols = pyr.heatmaps[-1].shape
    levels = len(pyr.heatmaps)
    labels = smoothed_location_labels(np.array([[gt.row, gt.col]]), rows, cols, levels, sigma)
    flat_h = [h.reshape(1, -1) for h in pyr.heatmaps]
    flat_p = [p.reshape(1, -1) for p in labels]
    return distill_loss_batch(flat_h, flat_p, levels)


# --- prediction and training ----------------------------------------------

def predict_locations(weights: LocalizerWeights, split: DatasetSplit, batch_size: int = 256) -> np.ndarray:
    """(N, 2) finest-level argmax cells for every pair in the split."""
    rows, cols = split.grid_shape
    n = len(split)
    out = np.empty((n, 2), dtype=np.int64)
    grounds = split.grounds()
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        pooled = pool_levels(split.aerial_batch(idx), weights.levels)
        scores, _, _, _ = forward_batch(weights, grounds[list(idx)], pooled)
        flat = np.argmax(scores[-1], axis=1)
        out[list(idx), 0] = flat // cols
        out[list(idx), 1] = flat % cols
    return out


def mean_error_cells(weights: LocalizerWeights, split: DatasetSplit) -> float:
    """Mean finest-level displacement (in cells) against the split's GT."""
    pred = predict_locations(weights, split)
    gt = split.unlock_gt().gt_array()
    return float(np.mean(np.linalg.norm((pred - gt).astype(np.float64), axis=1)))


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    supervise_levels: int | None = None  # level cutoff; None supervises all levels
    seed: int = 0


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    val_error: list = field(default_factory=list)
    best_epoch: int | None = None


def train(
    weights: LocalizerWeights,
    split: DatasetSplit,
    labels: list[np.ndarray],
    config: TrainConfig,
    val_split: DatasetSplit | None = None,
    em_split: DatasetSplit | None = None,
    em_weight: float = 0.0,
) -> tuple[LocalizerWeights, TrainHistory]:
    """SGD-with-momentum training loop.

    ``labels`` is one stacked (N, rk, ck) array per level for the whole split.
    When ``val_split`` is given, the returned weights are the snapshot of the
    epoch with lowest validation mean error; otherwise the final epoch. When
    ``em_split`` is given, every step adds ``em_weight`` times the entropy
    gradient of one batch from it (one source batch and one target batch per
    step); with em_weight = 0 the trajectory is bit-identical to training on
    ``split`` alone.
    """
    cutoff = _check_cutoff(weights.levels, config.supervise_levels)
    n = len(split)
    if n == 0:
        raise ValueError("empty training split")
    flat_labels = [lab.reshape(n, -1) for lab in labels[:cutoff]]
    grounds = split.grounds()

    shuffle_rng, em_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    em_state = {"order": None, "pos": 0}
    em_grounds = em_split.grounds() if em_split is not None else None

    def next_em_batch(size):
        if em_state["order"] is None or em_state["pos"] + size > len(em_split):
            em_state["order"] = em_rng.permutation(len(em_split))
            em_state["pos"] = 0
        idx = em_state["order"][em_state["pos"] : em_state["pos"] + size]
        em_state["pos"] += size
        return idx

    w = weights.copy()
    v_g = np.zeros_like(w.w_ground)
    v_a = np.zeros_like(w.w_aerial)
    history = TrainHistory()
    best = (np.inf, None)

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            pooled = pool_levels(split.aerial_batch(idx), w.levels)
            batch_labels = [lab[idx] for lab in flat_labels]
            loss, gw_g, gw_a = backward_batch(w, grounds[idx], pooled, cutoff, batch_labels)
            if em_split is not None:
                em_idx = next_em_batch(min(config.batch_size, len(em_split)))
                em_pooled = pool_levels(em_split.aerial_batch(em_idx), w.levels)
                em_loss, eg_g, eg_a = backward_batch(
                    w, em_grounds[em_idx], em_pooled, cutoff, None, em_weight=em_weight
                )
                loss += em_loss
                gw_g = gw_g + eg_g
                gw_a = gw_a + eg_a
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss!r} at epoch {epoch}, batch start {start}"
                )
            v_g = config.momentum * v_g - config.learning_rate * gw_g
            v_a = config.momentum * v_a - config.learning_rate * gw_a
            w.w_ground = w.w_ground + v_g
            w.w_aerial = w.w_aerial + v_a
            epoch_loss += loss * len(idx)
        history.epoch_loss.append(epoch_loss / n)
        if val_split is not None:
            err = mean_error_cells(w, val_split)
            history.val_error.append(err)
            if err < best[0]:
                best = (err, w.copy())
                history.best_epoch = epoch

    if val_split is not None and best[1] is not None:
        return best[1], history
    return w, history


# --- persistence -----------------------------------------------------------

WEIGHTS_FORMAT_VERSION = 1


def save_weights(path, weights: LocalizerWeights, config_hash: str = "") -> None:
    np.savez(
        path,
        format_version=WEIGHTS_FORMAT_VERSION,
        w_ground=weights.w_ground,
        w_aerial=weights.w_aerial,
        levels=weights.levels,
        config_hash=config_hash,
    )


def load_weights(path) -> tuple[LocalizerWeights, str]:
    data = np.load(path, allow_pickle=False)
    version = int(data["format_version"])
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version}")
    w = LocalizerWeights(data["w_ground"], data["w_aerial"], int(data["levels"]))
    return w, str(data["config_hash"])


# --- estimator facade ------------------------------------------------------

class CoarseToFineLocalizer(BaseEstimator):
    """Supervised trainer/predictor with a scikit-learn style surface.

    ``fit`` consumes a labeled :class:`DatasetSplit` (fine GT visible) and
    trains the bilinear matcher against Gaussian-smoothed location labels;
    ``predict`` returns finest-level argmax cells.
    """

    def __init__(
        self,
        embed_dim: int = 8,
        levels: int = 3,
        label_sigma: float = 4.0,
        learning_rate: float = 0.05,
        momentum: float = 0.9,
        epochs: int = 20,
        batch_size: int = 64,
        supervise_levels: int | None = None,
        random_state: int = 0,
    ):
        self.embed_dim = embed_dim
        self.levels = levels
        self.label_sigma = label_sigma
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.supervise_levels = supervise_levels
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            supervise_levels=self.supervise_levels,
            seed=self.random_state,
        )

    def fit(self, split: DatasetSplit, y=None, val_split: DatasetSplit | None = None,
            warm_start_weights: LocalizerWeights | None = None):
        rows, cols = split.grid_shape
        channels = split.pairs[0].aerial.shape[2]
        if warm_start_weights is not None:
            w0 = warm_start_weights.copy()
        else:
            w0 = init_weights(channels, self.embed_dim, self.levels, self.random_state)
        labels = smoothed_location_labels(split.gt_array(), rows, cols, w0.levels, self.label_sigma)
        self.weights_, self.history_ = train(w0, split, labels, self._train_config(), val_split)
        return self

    def predict(self, split: DatasetSplit) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise RuntimeError("not fitted")
        return predict_locations(self.weights_, split)

    def predict_pyramid(self, pair) -> PredictionPyramid:
        if not hasattr(self, "weights_"):
            raise RuntimeError("not fitted")
        return forward(self.weights_, pair)
