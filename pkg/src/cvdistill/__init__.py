"""Weakly-supervised self-distillation for fine-grained cross-view localization.

Everything runs at desk scale on synthetic worlds: a toy coarse-to-fine
matcher stands in for the heavy localization backbones, and the adaptation
pipeline (pseudo ground truth, auxiliary student, outlier filtering) is
implemented exactly and verifiable against brute-force oracles.
"""

from cvdistill.heatmap import (
    GridLoc,
    argmax_loc,
    block_downsample,
    entropy,
    gaussian_peak,
    normalize,
)
from cvdistill.model import CoarseToFineLocalizer, LocalizerWeights, TrainConfig
from cvdistill.world import CrossViewPair, DatasetSplit, DomainSpec, generate_world

__all__ = [
    "GridLoc",
    "normalize",
    "argmax_loc",
    "gaussian_peak",
    "block_downsample",
    "entropy",
    "DomainSpec",
    "CrossViewPair",
    "DatasetSplit",
    "generate_world",
    "LocalizerWeights",
    "TrainConfig",
    "CoarseToFineLocalizer",
]
