"""Multi-scale referring segmentation for remote sensing imagery."""

from .data_model import (
    CategoryTaxonomy,
    DatasetIndex,
    Expression,
    ReferringSample,
    load_dataset,
    stratified_split,
)
from .harness import TrainConfig, ablate, evaluate, train
from .metrics import EvalRecord, aggregate, sample_iou
from .network import MRSNet, HashTextEncoder, SegmentationOutput, ToyVisionEncoder, bce_loss

__version__ = "0.1.0"

__all__ = [
    "CategoryTaxonomy",
    "DatasetIndex",
    "EvalRecord",
    "Expression",
    "HashTextEncoder",
    "MRSNet",
    "ReferringSample",
    "SegmentationOutput",
    "ToyVisionEncoder",
    "TrainConfig",
    "__version__",
    "ablate",
    "aggregate",
    "bce_loss",
    "evaluate",
    "load_dataset",
    "sample_iou",
    "stratified_split",
    "train",
]
