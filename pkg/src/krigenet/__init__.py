"""Inductive spatio-temporal kriging with virtual-node graph augmentation.

Public surface: the sklearn-style estimators, the graph/data utilities they
consume, and the evaluation metrics. Everything else (autodiff engine,
network internals, training loop) is importable from the submodules.
"""

from .autodiff import Tensor, backward, grad_check
from .data import Dataset, load, normalize, split_7_1_2, synth_generate
from .estimators import KNNInterpolator, KrigingNetwork, MeanInterpolator, OrdinaryKriging
from .graphs import (
    MissingPattern,
    SpatialGraph,
    apply_missing,
    degree_stats,
    graph_from_coords,
    graph_from_edges,
    insert_virtual_nodes,
    remove_self_loops,
)
from .metrics import MetricsReport, evaluate
from .network import load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "Dataset",
    "load",
    "normalize",
    "split_7_1_2",
    "synth_generate",
    "KrigingNetwork",
    "MeanInterpolator",
    "KNNInterpolator",
    "OrdinaryKriging",
    "MissingPattern",
    "SpatialGraph",
    "apply_missing",
    "degree_stats",
    "graph_from_coords",
    "graph_from_edges",
    "insert_virtual_nodes",
    "remove_self_loops",
    "MetricsReport",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "train",
]
