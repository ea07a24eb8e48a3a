"""Metrics: displacement errors, longitudinal/lateral split, rank
correlation, CSV exports."""

import csv

import numpy as np
import pytest

from cvdistill import evaluation as ev
from cvdistill import model as md
from cvdistill import world as wd
from cvdistill.heatmap import GridLoc


def spearman_oracle(x, y):
    """Pearson correlation of average ranks, computed by hand."""

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        sorted_v = v[order]
        while i < len(v):
            j = i
            while j < len(v) and sorted_v[j] == sorted_v[i]:
                j += 1
            r[order[i:j]] = (i + j - 1) / 2.0 + 1
            i = j
        return r

    rx, ry = ranks(np.asarray(x, float)), ranks(np.asarray(y, float))
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx**2).sum() * (ry**2).sum()))


def test_evaluate_errors_oracle(tiny_splits, tiny_teacher):
    split = tiny_splits["test"]
    result = ev.evaluate(tiny_teacher, split)
    pred = md.predict_locations(tiny_teacher, split)
    gt = split.gt_array()
    s = split.scale_s
    for i in (0, 10, 33):
        expect = s * np.hypot(pred[i, 0] - gt[i, 0], pred[i, 1] - gt[i, 1])
        assert np.isclose(result.errors_m[i], expect)


def test_evaluate_unlocks_hidden_split(tiny_splits, tiny_teacher):
    result = ev.evaluate(tiny_teacher, tiny_splits["adapt"])
    assert result.errors_m.shape == (len(tiny_splits["adapt"]),)


def test_lon_lat_decomposition_exact(tiny_splits, tiny_teacher):
    result = ev.evaluate(tiny_teacher, tiny_splits["test"])
    assert np.allclose(result.lon_m**2 + result.lat_m**2, result.errors_m**2, atol=1e-9)
    assert (result.lon_m >= 0).all() and (result.lat_m >= 0).all()


def test_lon_lat_axis_aligned_case():
    # error along the heading shows up purely as longitudinal
    pair = wd.CrossViewPair(0, np.zeros((8, 8, 2)), np.zeros(2), GridLoc(4, 4),
                            0.5, (0.0, 1.0))
    err_vec = np.array([[0.0, 3.0]])
    heading = pair.heading[None, :]
    lon = 0.5 * abs(float((err_vec @ heading.T)[0, 0]))
    perp = np.array([[-heading[0, 1], heading[0, 0]]])
    lat = 0.5 * abs(float((err_vec @ perp.T)[0, 0]))
    assert lon == 1.5 and lat == 0.0


def test_mean_median_properties(tiny_splits, tiny_teacher):
    result = ev.evaluate(tiny_teacher, tiny_splits["test"])
    assert np.isclose(result.mean_m, result.errors_m.mean())
    assert np.isclose(result.median_m, np.median(result.errors_m))


def test_compare_counts(tiny_splits, tiny_teacher):
    a = ev.evaluate(tiny_teacher, tiny_splits["test"])
    b = ev.evaluate(tiny_teacher, tiny_splits["test"])
    record = ev.compare(a, b)
    assert record.unchanged == len(tiny_splits["test"])
    assert record.improved == record.worsened == 0
    assert int(record.hist_counts.sum()) == len(tiny_splits["test"])


def test_compare_detects_change(tiny_splits, tiny_teacher):
    a = ev.evaluate(tiny_teacher, tiny_splits["test"])
    other = md.init_weights(4, 6, 2, seed=12345)
    b = ev.evaluate(other, tiny_splits["test"])
    record = ev.compare(a, b)
    assert record.improved + record.worsened + record.unchanged == len(tiny_splits["test"])
    assert np.allclose(record.delta, b.errors_m - a.errors_m)


def test_compare_mismatched_samples(tiny_splits, tiny_teacher):
    a = ev.evaluate(tiny_teacher, tiny_splits["test"])
    b = ev.evaluate(tiny_teacher, tiny_splits["target-val"])
    with pytest.raises(ValueError, match="different samples"):
        ev.compare(a, b)


def test_rank_correlation_perfect():
    assert ev.rank_correlation([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert ev.rank_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0


def test_rank_correlation_matches_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.integers(0, 5, 30).astype(float)
        y = x + rng.standard_normal(30)
        assert np.isclose(ev.rank_correlation(x, y), spearman_oracle(x, y), atol=1e-12)


def test_rank_correlation_constant_input_is_zero():
    assert ev.rank_correlation([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0


def test_rank_correlation_validation():
    with pytest.raises(ValueError):
        ev.rank_correlation([1.0], [2.0])
    with pytest.raises(ValueError):
        ev.rank_correlation([1.0, 2.0], [1.0, 2.0, 3.0])


def test_per_sample_csv(tmp_path, tiny_splits, tiny_teacher):
    result = ev.evaluate(tiny_teacher, tiny_splits["test"])
    path = tmp_path / "per_sample.csv"
    ev.write_per_sample_csv(path, result)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ev.PER_SAMPLE_COLUMNS
    assert len(rows) == len(tiny_splits["test"]) + 1
    assert float(rows[1][1]) == result.errors_m[0]


def test_csv_outputs_byte_deterministic(tmp_path, tiny_splits, tiny_teacher):
    result = ev.evaluate(tiny_teacher, tiny_splits["test"])
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    ev.write_per_sample_csv(p1, result)
    ev.write_per_sample_csv(p2, result)
    assert p1.read_bytes() == p2.read_bytes()


def test_histogram_csv(tmp_path, tiny_splits, tiny_teacher):
    a = ev.evaluate(tiny_teacher, tiny_splits["test"])
    b = ev.evaluate(md.init_weights(4, 6, 2, 1), tiny_splits["test"])
    record = ev.compare(a, b)
    path = tmp_path / "hist.csv"
    ev.write_histogram_csv(path, record)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["bin_left", "bin_right", "count"]
    assert sum(int(r[2]) for r in rows[1:]) == len(tiny_splits["test"])


def test_scatter_csv(tmp_path):
    path = tmp_path / "scatter.csv"
    ev.write_scatter_csv(path, [1.0, 2.0], [0.5, 0.25], [7, 8])
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows == [["pair_id", "d", "eps"], ["7", "1.0", "0.5"], ["8", "2.0", "0.25"]]
