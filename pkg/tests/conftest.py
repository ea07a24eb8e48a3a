import numpy as np
import pytest

from cvdistill import model as md
from cvdistill import world as wd


def small_world(seed=3, n_adapt=120, rows=16, cols=16, levels=2, channels=4):
    src = wd.DomainSpec("source", channels, 1.5, seed=11, noise_std=0.05)
    tgt = wd.DomainSpec(
        "target", channels, 1.5, seed=12, noise_std=0.1,
        gain=tuple(1.0 + 0.25 * np.array([1, -1, 0.7, -0.7])[:channels]),
        bias=tuple(0.05 * np.array([1, -1, 0.5, -0.5])[:channels]),
    )
    sizes = wd.SplitSizes(160, 40, n_adapt, 40, 60)
    return wd.generate_world(src, tgt, sizes, rows, cols, levels, scale_s=0.5, seed=seed)


@pytest.fixture(scope="session")
def tiny_splits():
    return small_world()


@pytest.fixture(scope="session")
def tiny_teacher(tiny_splits):
    source = tiny_splits["source-train"]
    rows, cols = source.grid_shape
    w0 = md.init_weights(4, 6, 2, seed=1)
    labels = md.smoothed_location_labels(source.gt_array(), rows, cols, 2, 2.0)
    cfg = md.TrainConfig(learning_rate=0.05, epochs=4, batch_size=32, seed=2)
    weights, _ = md.train(w0, source, labels, cfg, tiny_splits["source-val"])
    return weights
