"""Synthetic world generation: determinism, GT hiding, split structure."""

import numpy as np
import pytest

from cvdistill import world as wd
from cvdistill.heatmap import GridLoc

from conftest import small_world


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        wd.DomainSpec("x", 0, 1.0)
    with pytest.raises(ValueError):
        wd.DomainSpec("x", 3, 0.0)
    with pytest.raises(ValueError):
        wd.DomainSpec("x", 3, 1.0, noise_std=-0.1)


def test_domain_spec_broadcast():
    spec = wd.DomainSpec("x", 3, 1.0, gain=2.0, bias=-1.0)
    assert np.array_equal(spec.gain_vector(), [2, 2, 2])
    assert np.array_equal(spec.bias_vector(), [-1, -1, -1])


def test_domain_spec_dict_roundtrip():
    spec = wd.DomainSpec("target", 4, 1.5, gain=(1.0, 2.0, 0.5, 1.1), noise_std=0.2, seed=9)
    back = wd.DomainSpec.from_dict(spec.to_dict())
    assert np.array_equal(back.gain_vector(), spec.gain_vector())
    assert np.array_equal(back.bias_vector(), spec.bias_vector())
    assert (back.domain_id, back.smoothness, back.noise_std, back.seed) == (
        "target", 1.5, 0.2, 9)


def test_split_sizes_from_target_pool():
    sizes = wd.SplitSizes.from_target_pool(100, 20, 1000)
    assert (sizes.adapt, sizes.target_val, sizes.test) == (700, 100, 200)
    assert sizes.adapt + sizes.target_val + sizes.test == 1000


def test_split_sizes_positive():
    with pytest.raises(ValueError):
        wd.SplitSizes(0, 1, 1, 1, 1)


def test_world_splits_and_sizes(tiny_splits):
    assert set(tiny_splits) == {"source-train", "source-val", "adapt", "target-val", "test"}
    assert len(tiny_splits["source-train"]) == 160
    assert len(tiny_splits["adapt"]) == 120
    assert tiny_splits["adapt"].grid_shape == (16, 16)


def test_pair_ids_globally_unique(tiny_splits):
    all_ids = np.concatenate([s.pair_ids() for s in tiny_splits.values()])
    assert len(np.unique(all_ids)) == all_ids.size


def test_generation_is_deterministic():
    a = small_world()
    b = small_world()
    for name in a:
        assert np.array_equal(a[name].grounds(), b[name].grounds())
        assert np.array_equal(a[name].aerial_batch(range(3)), b[name].aerial_batch(range(3)))
        assert np.array_equal(a[name].headings(), b[name].headings())


def test_different_seed_differs():
    a = small_world(seed=3)
    b = small_world(seed=4)
    assert not np.array_equal(a["test"].grounds(), b["test"].grounds())


def test_aerial_cells_unit_normalized(tiny_splits):
    patch = tiny_splits["test"].pairs[0].aerial
    norms = np.linalg.norm(patch, axis=2)
    assert np.allclose(norms, 1.0, atol=1e-9)


def test_adapt_gt_hidden(tiny_splits):
    with pytest.raises(wd.GroundTruthHidden, match="hidden"):
        tiny_splits["adapt"].gt_array()
    # unlock produces a readable copy, the original stays hidden
    unlocked = tiny_splits["adapt"].unlock_gt()
    assert unlocked.gt_array().shape == (120, 2)
    with pytest.raises(wd.GroundTruthHidden):
        tiny_splits["adapt"].pairs[0].gt_loc


def test_eval_splits_visible(tiny_splits):
    for name in ("source-train", "source-val", "target-val", "test"):
        assert tiny_splits[name].gt_array().shape[1] == 2


def test_gt_in_interior(tiny_splits):
    rows, cols = tiny_splits["test"].grid_shape
    gt = tiny_splits["test"].gt_array()
    assert gt[:, 0].min() >= 1 and gt[:, 0].max() <= rows - 2
    assert gt[:, 1].min() >= 1 and gt[:, 1].max() <= cols - 2


def test_headings_unit_norm(tiny_splits):
    h = tiny_splits["test"].headings()
    assert np.allclose(np.linalg.norm(h, axis=1), 1.0, atol=1e-9)


def test_ground_is_corrupted_feature(tiny_splits):
    # source has noise but gain 1 / bias 0: ground ~ feature at the GT cell
    split = tiny_splits["source-val"]
    pair = split.pairs[0]
    feat = pair.aerial[pair.gt_loc.row, pair.gt_loc.col]
    assert np.linalg.norm(pair.ground - feat) < 0.5  # noise_std 0.05, 4 channels


def test_domain_gap_applied():
    # with zero noise the target ground equals gain*feat + bias exactly
    src = wd.DomainSpec("source", 3, 1.0, seed=1)
    tgt = wd.DomainSpec("target", 3, 1.0, gain=(2.0, 1.0, 0.5), bias=(0.1, 0.0, -0.1), seed=2)
    splits = wd.generate_world(src, tgt, wd.SplitSizes(4, 2, 4, 2, 2), 8, 8, 2, seed=0)
    pair = splits["test"].pairs[0]
    feat = pair.aerial[pair.gt_loc.row, pair.gt_loc.col]
    expect = np.array([2.0, 1.0, 0.5]) * feat + np.array([0.1, 0.0, -0.1])
    assert np.allclose(pair.ground, expect)


def test_subset_keeps_role(tiny_splits):
    sub = tiny_splits["test"].subset([0, 2, 4])
    assert sub.role == "test" and len(sub) == 3
    assert sub.pairs[1].pair_id == tiny_splits["test"].pairs[2].pair_id


def test_channel_mismatch_rejected():
    src = wd.DomainSpec("source", 3, 1.0)
    tgt = wd.DomainSpec("target", 4, 1.0)
    with pytest.raises(ValueError, match="feature_channels"):
        wd.generate_world(src, tgt, wd.SplitSizes(2, 1, 2, 1, 1), 8, 8, 2)


def test_grid_level_divisibility_rejected():
    src = wd.DomainSpec("source", 3, 1.0)
    tgt = wd.DomainSpec("target", 3, 1.0)
    with pytest.raises(ValueError, match="divisible"):
        wd.generate_world(src, tgt, wd.SplitSizes(2, 1, 2, 1, 1), 12, 12, 4)


def test_pair_rejects_bad_heading():
    with pytest.raises(ValueError, match="unit"):
        wd.CrossViewPair(0, np.zeros((4, 4, 2)), np.zeros(2), GridLoc(1, 1), 0.5, (1.0, 1.0))


def test_world_save_load_roundtrip(tmp_path, tiny_splits):
    wd.save_world(tmp_path / "w", tiny_splits, {"world_config_hash": "abc"})
    loaded, manifest = wd.load_world(tmp_path / "w")
    assert manifest["world_config_hash"] == "abc"
    assert set(loaded) == set(tiny_splits)
    assert np.array_equal(loaded["test"].grounds(), tiny_splits["test"].grounds())
    assert np.array_equal(
        loaded["test"].aerial_batch(range(5)), tiny_splits["test"].aerial_batch(range(5))
    )
    # hidden flag survives the roundtrip
    with pytest.raises(wd.GroundTruthHidden):
        loaded["adapt"].gt_array()
