"""Graph contrastive learning with learnable node-mask and edge-perturbation views."""
from .errors import CGRLError, DivergenceError, FormatError, ParameterError, ShapeError, ValidationError
from .graph_data import Graph, load_dataset, make_synthetic, save_dataset
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "CGRLError",
    "DivergenceError",
    "FormatError",
    "Graph",
    "ParameterError",
    "ShapeError",
    "TrainConfig",
    "ValidationError",
    "evaluate",
    "load_dataset",
    "make_synthetic",
    "save_dataset",
    "train",
]
__version__ = "0.1.0"
