"""Three-network probability-sum ensemble for mammogram ROI classification, on a numpy autograd core."""

from .architectures import (
    DenseSpec,
    EffSpec,
    XceptionSpec,
    build_densenet_like,
    build_efficientnet_like,
    build_model,
    build_xception_like,
    preset,
)
from .data import CLASS_NAMES, DatasetSplit, RoiSample, synthesize_dataset, train_test_split
from .ensemble import argmax_class, fuse_sum, predict_ensemble
from .metrics import ConfusionMatrix, MetricReport, compute_report, format_table
from .tensor import Tensor
from .training import TrainConfig, evaluate_model, load_checkpoint, save_checkpoint, train_model

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ConfusionMatrix",
    "DatasetSplit",
    "DenseSpec",
    "EffSpec",
    "MetricReport",
    "RoiSample",
    "Tensor",
    "TrainConfig",
    "XceptionSpec",
    "argmax_class",
    "build_densenet_like",
    "build_efficientnet_like",
    "build_model",
    "build_xception_like",
    "compute_report",
    "evaluate_model",
    "format_table",
    "fuse_sum",
    "load_checkpoint",
    "predict_ensemble",
    "preset",
    "save_checkpoint",
    "synthesize_dataset",
    "train_model",
    "train_test_split",
]
