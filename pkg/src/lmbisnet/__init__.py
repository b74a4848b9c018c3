"""Lightweight multipath, bidirectional-skip CNN for retinal vessel segmentation.

Pure numpy: differentiable kernels, the network, training, data handling,
evaluation metrics and a command-line front end.
"""

from .checkpoint import CheckpointError, apply_checkpoint, load_checkpoint, make_checkpoint, save_checkpoint
from .data import DataError, DatasetManifest, SampleSet, read_manifest
from .metrics import ConfusionCounts, MetricsReport, compute_metrics, confusion, evaluate_image, roc_auc
from .model import TINY_CONFIG, Model, NetworkConfig, build_network, count_parameters, forward
from .tensor import NonFiniteError, grad_check
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfusionCounts",
    "DataError",
    "DatasetManifest",
    "MetricsReport",
    "Model",
    "NetworkConfig",
    "NonFiniteError",
    "SampleSet",
    "TINY_CONFIG",
    "TrainConfig",
    "apply_checkpoint",
    "build_network",
    "compute_metrics",
    "confusion",
    "count_parameters",
    "evaluate_image",
    "forward",
    "grad_check",
    "load_checkpoint",
    "make_checkpoint",
    "read_manifest",
    "roc_auc",
    "save_checkpoint",
    "train",
]
