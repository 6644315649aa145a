"""Sampled, domain-decomposed edge-conditioned MPNNs with halo exchange."""

from .config import TrainConfig, load_config
from .graph import PointSet, SampledGraph, build_graph
from .model import ModelSpec, forward_hops, init_params
from .partition import PartitionPlan, decompose
from .train import evaluate, train

__all__ = [
    "TrainConfig", "load_config", "PointSet", "SampledGraph", "build_graph", "ModelSpec",
    "forward_hops", "init_params", "PartitionPlan", "decompose", "evaluate", "train",
]
__version__ = "0.1.0"
