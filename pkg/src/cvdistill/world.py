"""Synthetic cross-view localization worlds.

A world is a set of ground/aerial pairs in two domains (source and target)
with a controllable domain gap. Aerial "imagery" is a smoothed, per-cell
unit-normalized random feature field; the ground observation is the feature
vector at the (hidden) camera cell, passed through the domain's corruption
(per-channel gain, bias, additive noise). Generation is fully deterministic
given the specs and seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from cvdistill.heatmap import GridLoc
from cvdistill.validation import check_in_grid, check_unit_vector


class GroundTruthHidden(RuntimeError):
    """Raised when code reads the fine GT of a weakly-supervised split."""


@dataclass(frozen=True)
class DomainSpec:
    """One domain's generative parameters, including its ground-view corruption."""

    domain_id: str
    feature_channels: int
    smoothness: float
    gain: tuple[float, ...] | float = 1.0
    bias: tuple[float, ...] | float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be positive")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def gain_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.gain, dtype=np.float64), (self.feature_channels,)).copy()

    def bias_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.bias, dtype=np.float64), (self.feature_channels,)).copy()

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "feature_channels": self.feature_channels,
            "smoothness": self.smoothness,
            "gain": list(self.gain_vector()),
            "bias": list(self.bias_vector()),
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        gain = d.get("gain", 1.0)
        bias = d.get("bias", 0.0)
        return cls(
            domain_id=d["domain_id"],
            feature_channels=int(d["feature_channels"]),
            smoothness=float(d["smoothness"]),
            gain=tuple(gain) if isinstance(gain, (list, tuple)) else float(gain),
            bias=tuple(bias) if isinstance(bias, (list, tuple)) else float(bias),
            noise_std=float(d.get("noise_std", 0.0)),
            seed=int(d.get("seed", 0)),
        )


class CrossViewPair:
    """One ground observation plus its covering aerial patch.

    The fine GT cell is hidden behind an access flag so that adaptation code
    cannot read it; evaluation code unlocks it explicitly.
    """

    def __init__(self, pair_id, aerial, ground, gt_loc, scale_s, heading, gt_hidden=False):
        if scale_s <= 0:
            raise ValueError("scale_s must be > 0")
        rows, cols = aerial.shape[:2]
        check_in_grid(gt_loc.row, gt_loc.col, rows, cols)
        self.pair_id = int(pair_id)
        self.aerial = aerial
        self.ground = ground
        self.scale_s = float(scale_s)
        self.heading = check_unit_vector(heading)
        self.gt_hidden = bool(gt_hidden)
        self._gt = gt_loc

    @property
    def gt_loc(self) -> GridLoc:
        if self.gt_hidden:
            raise GroundTruthHidden(f"fine GT of pair {self.pair_id} is hidden")
        return self._gt

    def with_hidden_gt(self) -> "CrossViewPair":
        return CrossViewPair(self.pair_id, self.aerial, self.ground, self._gt,
                             self.scale_s, self.heading, gt_hidden=True)

    def with_visible_gt(self) -> "CrossViewPair":
        return CrossViewPair(self.pair_id, self.aerial, self.ground, self._gt,
                             self.scale_s, self.heading, gt_hidden=False)


@dataclass
class DatasetSplit:
    """An immutable list of pairs with a role in the adaptation protocol."""

    pairs: list
    role: str

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.pairs[0].aerial.shape[:2]

    @property
    def scale_s(self) -> float:
        return self.pairs[0].scale_s

    def grounds(self) -> np.ndarray:
        return np.stack([p.ground for p in self.pairs])

    def headings(self) -> np.ndarray:
        return np.stack([p.heading for p in self.pairs])

    def pair_ids(self) -> np.ndarray:
        return np.array([p.pair_id for p in self.pairs], dtype=np.int64)

    def gt_array(self) -> np.ndarray:
        """(N, 2) array of GT cells. Raises GroundTruthHidden on hidden splits."""
        return np.array([[p.gt_loc.row, p.gt_loc.col] for p in self.pairs], dtype=np.int64)

    def aerial_batch(self, indices) -> np.ndarray:
        return np.stack([self.pairs[i].aerial for i in indices])

    def hide_gt(self) -> "DatasetSplit":
        return DatasetSplit([p.with_hidden_gt() for p in self.pairs], self.role)

    def unlock_gt(self) -> "DatasetSplit":
        return DatasetSplit([p.with_visible_gt() for p in self.pairs], self.role)

    def subset(self, indices, role: str | None = None) -> "DatasetSplit":
        return DatasetSplit([self.pairs[i] for i in indices], role or self.role)


@dataclass(frozen=True)
class SplitSizes:
    source_train: int
    source_val: int
    adapt: int
    target_val: int
    test: int

    def __post_init__(self):
        for name, n in self.__dict__.items():
            if n < 1:
                raise ValueError(f"split size {name} must be >= 1")

    @classmethod
    def from_target_pool(cls, source_train: int, source_val: int, target_pool: int) -> "SplitSizes":
        """70/10/20 split of the target-area pool into adapt/val/test."""
        adapt = int(round(0.7 * target_pool))
        val = int(round(0.1 * target_pool))
        return cls(source_train, source_val, adapt, val, target_pool - adapt - val)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _domain_map(spec: DomainSpec, map_size: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    field_ = rng.standard_normal((map_size, map_size, spec.feature_channels))
    field_ = gaussian_filter(field_, sigma=(spec.smoothness, spec.smoothness, 0), mode="wrap")
    norms = np.linalg.norm(field_, axis=2, keepdims=True)
    return field_ / norms


def _sample_pairs(spec, amap, n, rows, cols, scale_s, scale_rng_seed, start_id, hidden):
    rng = np.random.default_rng(scale_rng_seed)
    map_size = amap.shape[0]
    gain = spec.gain_vector()
    bias = spec.bias_vector()
    pairs = []
    for i in range(n):
        r0 = int(rng.integers(0, map_size - rows + 1))
        c0 = int(rng.integers(0, map_size - cols + 1))
        # GT uniform over the interior, >= 1 cell from every border.
        gr = int(rng.integers(1, rows - 1))
        gc = int(rng.integers(1, cols - 1))
        aerial = amap[r0 : r0 + rows, c0 : c0 + cols, :]
        feat = aerial[gr, gc, :]
        noise = spec.noise_std * rng.standard_normal(spec.feature_channels)
        ground = gain * feat + bias + noise
        h = rng.standard_normal(2)
        h /= np.linalg.norm(h)
        pairs.append(
            CrossViewPair(start_id + i, aerial, ground, GridLoc(gr, gc), scale_s, h, gt_hidden=hidden)
        )
    return pairs


def generate_world(
    source: DomainSpec,
    target: DomainSpec,
    sizes: SplitSizes,
    rows: int,
    cols: int,
    levels: int,
    scale_s: float = 0.5,
    seed: int = 0,
    map_size: int | None = None,
) -> dict[str, DatasetSplit]:
    """Generate all splits of a two-domain world.

    Returns a dict with keys 'source-train', 'source-val', 'adapt', 'target-val'
    and 'test'. The adapt split has its fine GT hidden; evaluation splits keep
    it readable. Identical arguments regenerate bit-identical data.
    """
    if source.feature_channels != target.feature_channels:
        raise ValueError("source and target must share feature_channels")
    factor = 2 ** (levels - 1)
    if levels < 2 or rows % factor or cols % factor:
        raise ValueError(f"{rows}x{cols} grid not divisible across {levels} pyramid levels")
    if map_size is None:
        map_size = 4 * max(rows, cols)

    src_map = _domain_map(source, map_size)
    tgt_map = _domain_map(target, map_size)
    seeds = np.random.SeedSequence(seed).generate_state(5)

    splits = {}
    next_id = 0
    plan = [
        ("source-train", source, src_map, sizes.source_train, False),
        ("source-val", source, src_map, sizes.source_val, False),
        ("adapt", target, tgt_map, sizes.adapt, True),
        ("target-val", target, tgt_map, sizes.target_val, False),
        ("test", target, tgt_map, sizes.test, False),
    ]
    for (name, spec, amap, n, hidden), s in zip(plan, seeds):
        splits[name] = DatasetSplit(
            _sample_pairs(spec, amap, n, rows, cols, scale_s, int(s), next_id, hidden), name
        )
        next_id += n
    return splits


# --- persistence -----------------------------------------------------------

def save_world(directory, splits: dict[str, DatasetSplit], manifest_extra: dict | None = None) -> None:
    """Persist a world as a manifest plus per-split binary arrays.

    Aerial patches are stored as dense per-split arrays; the manifest records
    roles, sizes and the GT access flags.
    """
    import os

    os.makedirs(directory, exist_ok=True)
    manifest = {"splits": {}, **(manifest_extra or {})}
    for name, split in splits.items():
        hidden = split.pairs[0].gt_hidden
        readable = split.unlock_gt()
        arrays = {
            "aerial": np.stack([p.aerial for p in split.pairs]),
            "ground": readable.grounds(),
            "gt": readable.gt_array(),
            "heading": readable.headings(),
            "pair_id": readable.pair_ids(),
        }
        np.savez_compressed(os.path.join(directory, f"{name}.npz"), **arrays)
        manifest["splits"][name] = {
            "role": split.role,
            "size": len(split),
            "gt_hidden": hidden,
            "scale_s": split.scale_s,
        }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_world(directory) -> tuple[dict[str, DatasetSplit], dict]:
    import os

    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    splits = {}
    for name, meta in manifest["splits"].items():
        data = np.load(os.path.join(directory, f"{name}.npz"))
        pairs = [
            CrossViewPair(
                int(data["pair_id"][i]),
                data["aerial"][i],
                data["ground"][i],
                GridLoc(int(data["gt"][i, 0]), int(data["gt"][i, 1])),
                meta["scale_s"],
                data["heading"][i],
                gt_hidden=meta["gt_hidden"],
            )
            for i in range(meta["size"])
        ]
        splits[name] = DatasetSplit(pairs, meta["role"])
    return splits, manifest
