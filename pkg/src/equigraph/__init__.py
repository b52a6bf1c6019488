"""Distance- and angle-preserving graph networks with a numerical equivariance toolkit."""
from __future__ import annotations

__version__ = "0.1.0"

from .blocks import BlockConfig, Model, ModelConfig, PsiChoice, ReadoutConfig, preset
from .geometry import ConfigurationError, DegenerateGeometryError, TransformSpec, sample_transform
from .graph import Dataset, GraphBatch, GraphSample, load_dataset, read_graph_json, save_dataset
from .harness import check_equivariance, evaluate, grad_check, multi_seed_experiment, train

__all__ = [
    "BlockConfig", "ConfigurationError", "Dataset", "DegenerateGeometryError", "GraphBatch",
    "GraphSample", "Model", "ModelConfig", "PsiChoice", "ReadoutConfig", "TransformSpec",
    "check_equivariance", "evaluate", "grad_check", "load_dataset", "multi_seed_experiment",
    "preset", "read_graph_json", "sample_transform", "save_dataset", "train",
]
