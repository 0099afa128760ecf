"""Debiased classification with learned per-group softmax margins."""
from .data import DataBundle, DatasetConfig, GroupTable, LabeledBatch, make_bundle
from .meta import TrainConfig, train
from .metrics import MetricsReport, PredictionLog

__version__ = "0.1.0"

__all__ = ["DataBundle", "DatasetConfig", "GroupTable", "LabeledBatch", "MetricsReport",
           "PredictionLog", "TrainConfig", "make_bundle", "train", "__version__"]
