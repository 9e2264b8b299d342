"""Prior-fitted network for training-free node classification."""

from .graph import Graph, PpdMatrix, Task, edge_homophily
from .inference import InferenceConfig, predict
from .model import ModelConfig
from .priors import PriorConfig
from .training import TrainConfig, train

__all__ = [
    "Graph",
    "InferenceConfig",
    "ModelConfig",
    "PpdMatrix",
    "PriorConfig",
    "Task",
    "TrainConfig",
    "edge_homophily",
    "predict",
    "train",
]

__version__ = "0.1.0"
